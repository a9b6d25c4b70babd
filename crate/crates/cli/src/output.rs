use std::path::Path;

use dynimg::io::atomic_write;
use dynimg::{dtns, Error, Result};
use serde::Serialize;

/// Keyword of the PNG text chunk holding the run configuration.
pub const CONFIG_KEY: &str = "dynimg-config";

pub fn png_with_config(img: &image::RgbImage, config: &serde_json::Value) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let mut enc = png::Encoder::new(&mut buf, img.width(), img.height());
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| Error::Format(format!("png: {e}"));
    enc.add_itxt_chunk(CONFIG_KEY.into(), config.to_string()).map_err(fail)?;
    let mut w = enc.write_header().map_err(fail)?;
    w.write_image_data(img.as_raw()).map_err(fail)?;
    w.finish().map_err(fail)?;
    Ok(buf)
}

pub fn write_png(path: &Path, img: &image::RgbImage, config: &serde_json::Value) -> Result<()> {
    atomic_write(path, &png_with_config(img, config)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn write_dtns(path: &Path, tensor: &dtns::Tensor) -> Result<()> {
    atomic_write(path, &tensor.to_bytes()?)
}

/// `{"config": ..}` merged into a JSON object's metadata.
pub fn with_config(mut meta: serde_json::Value, config: &serde_json::Value) -> serde_json::Value {
    if let Some(obj) = meta.as_object_mut() {
        obj.insert("config".into(), config.clone());
    }
    meta
}
