//! Image-folder dataset in the 11-class cloud layout `<root>/<Abbrev>/<file>`.

mod image;
mod synthetic;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::tensor::Tensor;
use crate::{rng, Error, Result};

pub use self::image::{decode_image, decode_ppm, encode_ppm, resize, resize_region, Region};
pub(crate) use self::image::image_dims;
pub use synthetic::gen_synthetic;

pub const NUM_CLASSES: usize = 11;

/// `(name, abbreviation)`; the class index is the position.
pub const CLASSES: [(&str, &str); NUM_CLASSES] = [
    ("Altocumulus", "Ac"),
    ("Altostratus", "As"),
    ("Cumulonimbus", "Cb"),
    ("Cirrocumulus", "Cc"),
    ("Cirrus", "Ci"),
    ("Cirrostratus", "Cs"),
    ("Contrail", "Ct"),
    ("Cumulus", "Cu"),
    ("Nimbostratus", "Ns"),
    ("Stratocumulus", "Sc"),
    ("Stratus", "St"),
];

/// Published per-class sample counts of the full corpus, in class order.
pub const REFERENCE_COUNTS: [usize; NUM_CLASSES] = [221, 188, 242, 268, 139, 287, 200, 182, 274, 340, 202];

pub fn class_index(abbrev: &str) -> Option<usize> {
    CLASSES.iter().position(|&(_, a)| a == abbrev)
}

const EXTENSIONS: [&str; 5] = ["ppm", "png", "jpg", "jpeg", "jpe"];

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    /// Path relative to the dataset root, with `/` separators.
    pub path: String,
    pub orig_width: usize,
    pub orig_height: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub counts: [usize; NUM_CLASSES],
    pub image_size: usize,
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// CSV with columns `path,class,width,height` (original extents).
    pub fn manifest_csv(&self) -> String {
        let mut out = String::from("path,class,width,height\n");
        for s in &self.samples {
            let _ = writeln!(out, "{},{},{},{}", s.path, s.label, s.orig_width, s.orig_height);
        }
        out
    }

    /// Stacks the selected images into `(n, size, size, 3)`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let s = self.image_size;
        let mut data = Vec::with_capacity(indices.len() * s * s * 3);
        for &i in indices {
            data.extend_from_slice(self.samples[i].image.data());
        }
        Ok(Tensor::new(&[indices.len(), s, s, 3], data)?)
    }
}

fn warn(warnings: &mut Vec<String>, msg: String) {
    log::warn!("{msg}");
    warnings.push(msg);
}

/// Loads every image under `root`, resizing to `image_size x image_size`.
///
/// Files are visited in lexicographic path order; decoding runs in parallel
/// but the sample order does not depend on the worker count.
pub fn load_dataset(root: &Path, image_size: usize) -> Result<Dataset> {
    if image_size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let mut warnings = Vec::new();
    let mut files: Vec<(PathBuf, String, usize)> = Vec::new();
    let mut seen = [false; NUM_CLASSES];

    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(root, e))?;
    dirs.sort_by_key(|d| d.file_name());
    for dir in dirs {
        let name = dir.file_name().to_string_lossy().into_owned();
        let path = dir.path();
        if !path.is_dir() {
            continue;
        }
        let Some(label) = class_index(&name) else {
            warn(&mut warnings, format!("skipping unknown class directory {}", path.display()));
            continue;
        };
        seen[label] = true;
        let mut entries: Vec<_> = fs::read_dir(&path)
            .map_err(|e| Error::io(&path, e))?
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(&path, e))?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let file = entry.path();
            let ext = file
                .extension()
                .map(|e| e.to_string_lossy().to_ascii_lowercase())
                .unwrap_or_default();
            if !file.is_file() || !EXTENSIONS.contains(&ext.as_str()) {
                continue;
            }
            let rel = format!("{name}/{}", entry.file_name().to_string_lossy());
            files.push((file, rel, label));
        }
    }

    let decoded: Vec<Result<Sample>> = files
        .into_par_iter()
        .map(|(file, rel, label)| {
            let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
            let img = decode_image(&bytes).map_err(|e| Error::Undecodable {
                path: file.clone(),
                reason: e.to_string(),
            })?;
            let (h, w) = image_dims(&img)?;
            Ok(Sample {
                image: resize(&img, image_size, image_size)?,
                label,
                path: rel,
                orig_width: w,
                orig_height: h,
            })
        })
        .collect();
    let samples = decoded.into_iter().collect::<Result<Vec<_>>>()?;

    let mut counts = [0; NUM_CLASSES];
    for s in &samples {
        counts[s.label] += 1;
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("no images found under {}", root.display())));
    }
    for (c, &(_, abbrev)) in CLASSES.iter().enumerate() {
        if seen[c] && counts[c] == 0 {
            return Err(Error::Data(format!("class directory {abbrev} contains no images")));
        }
    }
    let missing: Vec<_> = (0..NUM_CLASSES).filter(|&c| !seen[c]).map(|c| CLASSES[c].1).collect();
    if !missing.is_empty() {
        warn(&mut warnings, format!("class directories missing: {}", missing.join(", ")));
    }
    log::info!("loaded {} images from {}: {counts:?}", samples.len(), root.display());
    Ok(Dataset {
        samples,
        counts,
        image_size,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub warnings: Vec<String>,
}

/// 80:20 split of sample indices. Stratified: each class is shuffled with
/// its own seeded stream and `floor(0.8 n_c)` go to training. Otherwise one
/// global shuffle with `floor(0.8 n)` to training. Both lists come back sorted.
pub fn split_80_20(labels: &[usize], seed: u64, stratified: bool) -> Result<Split> {
    if labels.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let mut warnings = Vec::new();
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut take = |mut idx: Vec<usize>, stream: &[u64]| {
        idx.shuffle(&mut rng::stream(seed, stream));
        let cut = idx.len() * 4 / 5;
        train.extend_from_slice(&idx[..cut]);
        validation.extend_from_slice(&idx[cut..]);
    };
    if stratified {
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        for c in 0..classes {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            if idx.len() == 1 {
                warn(&mut warnings, format!("class {c} has a single sample; it goes to validation"));
            }
            if !idx.is_empty() {
                take(idx, &[c as u64]);
            }
        }
    } else {
        take((0..labels.len()).collect(), &[u64::MAX]);
    }
    train.sort_unstable();
    validation.sort_unstable();
    Ok(Split {
        train,
        validation,
        warnings,
    })
}
