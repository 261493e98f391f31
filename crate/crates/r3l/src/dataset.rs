//! Directories of PGM images.

use std::path::{Path, PathBuf};

use log::warn;
use r3l_core::image::ImageBuffer;

use crate::error::{Error, Result};
use crate::pgm;

/// `.pgm` files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Loads every image of [`list_images`]; fails on an empty directory.
pub fn load_dir(dir: &Path) -> Result<Vec<ImageBuffer>> {
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::Dataset(format!("{}: no .pgm images", dir.display())));
    }
    paths.iter().map(pgm::load_image).collect()
}

/// Drops images smaller than `patch` in either dimension, with a warning each.
pub fn usable_for_patches(images: Vec<ImageBuffer>, patch: usize) -> Vec<ImageBuffer> {
    images
        .into_iter()
        .enumerate()
        .filter(|(i, img)| {
            let ok = img.width() >= patch && img.height() >= patch;
            if !ok {
                warn!("image {i} ({}x{}) is smaller than the {patch}px patch; skipped", img.width(), img.height());
            }
            ok
        })
        .map(|(_, img)| img)
        .collect()
}

/// Writes `images` as `prefix000.pgm`, `prefix001.pgm`, ... into `dir`.
pub fn write_dir(dir: &Path, prefix: &str, images: &[ImageBuffer]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let path = dir.join(format!("{prefix}{i:03}.pgm"));
            pgm::save_image(&path, img)?;
            Ok(path)
        })
        .collect()
}
