//! 8-bit PNG reading and writing in the channel-major layout used by the
//! library.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use pseudoflow::pipeline::ImageSet;

use crate::CliError;

/// Reads `path` as a `channels`-channel image; returns levels `[C, H, W]`
/// and `(H, W)`.
pub fn load_png(path: &Path, channels: usize) -> Result<(Vec<u8>, usize, usize), CliError> {
    let img = image::open(path)
        .map_err(|e| CliError::user(format!("cannot read image {}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match channels {
        1 => img.to_luma8().into_raw(),
        3 => {
            let rgb = img.to_rgb8().into_raw();
            let mut out = vec![0u8; 3 * h * w];
            for (p, px) in rgb.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    out[c * h * w + p] = px[c];
                }
            }
            out
        }
        c => {
            return Err(CliError::user(format!(
                "images must have 1 or 3 channels, not {c}"
            )))
        }
    };
    Ok((data, h, w))
}

pub fn save_png(path: &Path, levels: &[u8], shape: &[usize]) -> Result<(), CliError> {
    let (c, h, w) = match shape {
        &[c, h, w] => (c, h, w),
        s => {
            return Err(CliError::user(format!(
                "cannot write shape {s:?} as an image"
            )))
        }
    };
    let res = match c {
        1 => GrayImage::from_raw(w as u32, h as u32, levels.to_vec())
            .expect("buffer matches shape")
            .save(path),
        3 => {
            let mut rgb = vec![0u8; 3 * h * w];
            for p in 0..h * w {
                for ch in 0..3 {
                    rgb[3 * p + ch] = levels[ch * h * w + p];
                }
            }
            RgbImage::from_raw(w as u32, h as u32, rgb)
                .expect("buffer matches shape")
                .save(path)
        }
        c => {
            return Err(CliError::user(format!(
                "images must have 1 or 3 channels, not {c}"
            )))
        }
    };
    res.map_err(|e| CliError::user(format!("cannot write {}: {e}", path.display())))
}

/// `*.png` files of a directory in name order.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::user(format!("cannot read directory {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Every PNG in `dir`, which must all have shape `[C, H, W]`.
pub fn load_image_set(dir: &Path, shape: &[usize]) -> Result<ImageSet, CliError> {
    if !dir.is_dir() {
        return Err(CliError::user(format!(
            "dataset directory {} does not exist",
            dir.display()
        )));
    }
    let files = list_pngs(dir)?;
    if files.is_empty() {
        return Err(CliError::user(format!(
            "dataset directory {} contains no PNG images",
            dir.display()
        )));
    }
    let mut items = Vec::with_capacity(files.len());
    let mut names = Vec::with_capacity(files.len());
    for f in &files {
        let (data, h, w) = load_png(f, shape[0])?;
        if (h, w) != (shape[1], shape[2]) {
            return Err(CliError::user(format!(
                "{} is {h}x{w}, expected {}x{}",
                f.display(),
                shape[1],
                shape[2]
            )));
        }
        items.push(data);
        names.push(file_stem(f));
    }
    Ok(ImageSet::with_names(shape, items, names)?)
}

pub fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}
