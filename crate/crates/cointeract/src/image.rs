//! PNG dumps of frame stacks.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use cointeract_core::blobworld::Frames;

use crate::Error;

/// Writes `<prefix>_<f>.png` for every frame; returns the paths.
pub fn write_pngs(dir: &Path, prefix: &str, frames: &Frames) -> Result<Vec<PathBuf>, Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::with_capacity(frames.n);
    for f in 0..frames.n {
        let path = dir.join(format!("{prefix}_{f}.png"));
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), frames.w as u32, frames.h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        w.write_image_data(frames.frame(f)).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        out.push(path);
    }
    Ok(out)
}
