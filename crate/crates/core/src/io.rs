//! PNG and mask-directory I/O.
//!
//! Images are 8-bit grayscale or RGB PNGs; a pixel value `v` maps to `v/255`.
//! A mask directory holds `mask_000.png`, `mask_001.png`, ... (8-bit
//! grayscale, nonzero means covered) and a `manifest.txt` listing the files in
//! mask-index order.

use std::fs;
use std::io::{BufReader, Cursor};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, MaskStack};

pub const MANIFEST: &str = "manifest.txt";

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn decode_png(path: &Path) -> Result<(png::ColorType, u32, u32, Vec<u8>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let decode_err = |source| Error::PngDecode {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = decoder.read_info().map_err(decode_err)?;
    let info = reader.info();
    let (color, depth) = (info.color_type, info.bit_depth);
    if depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedImage {
            path: path.to_path_buf(),
            reason: format!("bit depth {depth:?}, only 8-bit is supported"),
        });
    }
    if !matches!(color, png::ColorType::Grayscale | png::ColorType::Rgb) {
        return Err(Error::UnsupportedImage {
            path: path.to_path_buf(),
            reason: format!("colour type {color:?}, only grayscale and RGB are supported"),
        });
    }
    let size = reader.output_buffer_size().ok_or_else(|| Error::UnsupportedImage {
        path: path.to_path_buf(),
        reason: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(decode_err)?;
    let channels = if color == png::ColorType::Rgb { 3 } else { 1 };
    let row = frame.width as usize * channels;
    // Strip any row padding so the buffer is tightly packed.
    let packed: Vec<u8> = if frame.line_size == row {
        buf.truncate(row * frame.height as usize);
        buf
    } else {
        buf.chunks(frame.line_size)
            .take(frame.height as usize)
            .flat_map(|r| r[..row].iter().copied())
            .collect()
    };
    Ok((color, frame.width, frame.height, packed))
}

/// Loads an 8-bit grayscale or RGB PNG into `[0,1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let (color, width, height, bytes) = decode_png(path)?;
    let (w, h) = (width as usize, height as usize);
    let channels = if color == png::ColorType::Rgb { 3 } else { 1 };
    let n = w * h;
    let mut data = vec![0.0; channels * n];
    for (i, px) in bytes.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * n + i] = f64::from(v) / 255.0;
        }
    }
    ImageTensor::new(channels, h, w, data)
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn encode_png(width: usize, height: usize, color: png::ColorType, bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let encode_err = |source| Error::PngEncode {
        path: path.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(Cursor::new(&mut out), width as u32, height as u32);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(encode_err)?;
        writer.write_image_data(bytes).map_err(encode_err)?;
        writer.finish().map_err(encode_err)?;
    }
    Ok(out)
}

/// Encodes an image as PNG bytes. Values are clamped to `[0,1]` when `clamp`
/// is set; otherwise out-of-range values are an error.
pub fn encode_image(img: &ImageTensor, clamp: bool) -> Result<Vec<u8>> {
    if !clamp {
        let (lo, hi) = img.min_max();
        if lo < 0.0 || hi > 1.0 {
            return Err(Error::InvalidArgument(format!(
                "image values span [{lo}, {hi}], outside [0,1]; enable clamping to save"
            )));
        }
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let n = h * w;
    let data = img.data();
    let mut bytes = Vec::with_capacity(c * n);
    for i in 0..n {
        for ch in 0..c {
            bytes.push(quantize(data[ch * n + i]));
        }
    }
    let color = if c == 3 {
        png::ColorType::Rgb
    } else {
        png::ColorType::Grayscale
    };
    encode_png(w, h, color, &bytes, Path::new("<memory>"))
}

/// Saves an image as an 8-bit PNG via an atomic rename.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>, clamp: bool) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_image(img, clamp)?;
    atomic_write(path, &bytes)
}

/// Maps an arbitrary-range field affinely onto `[0,1]` for viewing.
pub fn visualize(img: &ImageTensor) -> ImageTensor {
    let (lo, hi) = img.min_max();
    let span = hi - lo;
    if span > 0.0 {
        ImageTensor::from_parts(img.shape(), img.data().iter().map(|v| (v - lo) / span).collect())
    } else {
        ImageTensor::from_parts(img.shape(), vec![0.0; img.data().len()])
    }
}

fn mask_file_name(i: usize) -> String {
    format!("mask_{i:03}.png")
}

/// Lists the mask files of a directory in canonical order. Without a manifest,
/// `mask_*.png` files are taken in name order.
fn mask_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "mask directory not found"),
        ));
    }
    let manifest = dir.join(MANIFEST);
    if manifest.exists() {
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        return Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| dir.join(l))
            .collect());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("mask_") && n.ends_with(".png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Reads a mask directory. Returns `None` when the directory lists no masks,
/// since an empty stack carries no size of its own.
pub fn load_mask_dir(dir: impl AsRef<Path>) -> Result<Option<MaskStack>> {
    let dir = dir.as_ref();
    let files = mask_files(dir)?;
    if files.is_empty() {
        return Ok(None);
    }
    let mut size = None;
    let mut data = Vec::new();
    for file in &files {
        let (color, w, h, bytes) = decode_png(file)?;
        if color != png::ColorType::Grayscale {
            return Err(Error::UnsupportedImage {
                path: file.clone(),
                reason: "masks must be 8-bit grayscale".into(),
            });
        }
        match size {
            None => size = Some((h, w)),
            Some(s) if s != (h, w) => {
                return Err(Error::Format {
                    path: file.clone(),
                    reason: format!("mask is {h}x{w}, expected {}x{}", s.0, s.1),
                })
            }
            _ => {}
        }
        data.extend(bytes.iter().map(|&b| if b != 0 { 1.0 } else { 0.0 }));
    }
    let (h, w) = size.expect("at least one mask");
    MaskStack::new(files.len(), h as usize, w as usize, data, true).map(Some)
}

/// Writes a binary stack in mask-directory format, creating `dir` if needed.
pub fn save_mask_dir(stack: &MaskStack, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    if !stack.is_binary() {
        return Err(Error::InvalidArgument(
            "only binary mask stacks can be written as a mask directory".into(),
        ));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, mask) in stack.masks().enumerate() {
        let name = mask_file_name(i);
        let bytes: Vec<u8> = mask.iter().map(|&v| if v > 0.0 { 255 } else { 0 }).collect();
        let path = dir.join(&name);
        let png = encode_png(stack.width(), stack.height(), png::ColorType::Grayscale, &bytes, &path)?;
        atomic_write(&path, &png)?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    atomic_write(&dir.join(MANIFEST), manifest.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_file_is_io_error() {
        let err = load_image("/nonexistent/nope.png").unwrap_err();
        assert!(err.is_io());
    }

    #[test]
    fn quantize_rounds_to_nearest() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(128.0 / 255.0), 128);
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(7.0), 255);
    }

    #[test]
    fn visualize_constant_field() {
        let img = ImageTensor::filled(1, 2, 2, 3.0).unwrap();
        assert_eq!(visualize(&img).data(), &[0.0; 4]);
    }
}
