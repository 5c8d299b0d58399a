//! File formats: tensor files, greymaps, run configs and checkpoints.

pub mod checkpoint;
pub mod pgm;
pub mod runconfig;
pub mod tensorfile;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};
use crate::train::synth::SynthSample;
use std::path::{Path, PathBuf};

/// Sorted paths in `dir` with the given extension.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_file() && p.extension().is_some_and(|e| e == ext) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Reads an image as `[3, H, W]`: a tensor file of shape `[3, H, W]` or
/// `[1, 3, H, W]`, or a greymap replicated over three channels.
pub fn read_image<T: Float>(path: &Path) -> Result<Tensor<T>> {
    if path.extension().is_some_and(|e| e == "pgm") {
        let g = pgm::read(path)?;
        let plane: Vec<T> = g.data.iter().map(|&v| T::of(v)).collect();
        return Tensor::new(&[3, g.h, g.w], plane.repeat(3));
    }
    let bytes = std::fs::read(path)?;
    let t: Tensor<T> = match tensorfile::peek_dtype(&bytes)? {
        d if d == T::DTYPE => tensorfile::decode(&bytes)?,
        crate::DType::F32 => tensorfile::decode::<f32>(&bytes)?.cast(),
        crate::DType::F64 => tensorfile::decode::<f64>(&bytes)?.cast(),
    };
    match *t.shape() {
        [3, h, w] | [1, 3, h, w] => t.reshape(&[3, h, w]),
        _ => Err(Error::shape("read_image", format!("{}: expected [3, H, W], got {:?}", path.display(), t.shape()))),
    }
}

/// Loads `images/NAME.ctfa` with `masks/NAME.pgm` pairs from `dir`.
pub fn load_dataset<T: Float>(dir: &Path) -> Result<Vec<SynthSample<T>>> {
    let mut out = Vec::new();
    for img in list_files(&dir.join("images"), "ctfa")? {
        let stem = img.file_stem().expect("listed file").to_string_lossy().into_owned();
        let mask_path = dir.join("masks").join(format!("{stem}.pgm"));
        let image = read_image::<T>(&img)?;
        let m = pgm::read_mask(&mask_path)?;
        if (m.h, m.w) != (image.shape()[1], image.shape()[2]) {
            return Err(Error::shape("load_dataset", format!("{stem}: mask {}x{} vs image {:?}", m.h, m.w, image.shape())));
        }
        let mask = Tensor::new(&[1, m.h, m.w], m.data.iter().map(|&b| if b { T::one() } else { T::zero() }).collect())?;
        out.push(SynthSample { image, mask });
    }
    if out.is_empty() {
        return Err(Error::format(format!("no images found in {}", dir.join("images").display())));
    }
    Ok(out)
}
