use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::synth::{DegradationSpec, PairedSample};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";

fn image_err(path: &Path, detail: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    }
}

/// Decodes a PNG to a `[1, H, W, 3]` tensor in [0, 1]. Gray is replicated,
/// alpha is dropped, 16-bit samples are reduced to 8 bits.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::EXPAND | Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(image_err(path, "unexpanded palette image")),
    };
    if info.bit_depth != BitDepth::Eight {
        return Err(image_err(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for row in buf.chunks(info.line_size).take(h) {
        for px in row[..w * channels].chunks(channels) {
            let rgb = if channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
            data.extend(rgb.iter().map(|&v| v as f32 / 255.0));
        }
    }
    Tensor::new(vec![1, h, w, 3], data)
}

/// Round-half-even quantization of [0, 1] values to 8 bits.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// Encodes a `[1, H, W, 3]` tensor as an 8-bit RGB PNG.
pub fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = match img.shape() {
        &[1, h, w, 3] => (h, w),
        s => return Err(image_err(path, format!("expected a [1, H, W, 3] image, got {s:?}"))),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(ColorType::Rgb);
    encoder.set_depth(BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| image_err(path, e))?;
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    writer.write_image_data(&bytes).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

pub fn clean_name(k: usize) -> String {
    format!("clean_{k:05}.png")
}

pub fn degraded_name(k: usize) -> String {
    format!("degraded_{k:05}.png")
}

/// Writes each pair as two PNGs plus one manifest line per sample.
pub fn write_dataset(dir: &Path, samples: &[PairedSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (k, s) in samples.iter().enumerate() {
        write_png(&dir.join(clean_name(k)), &s.clean)?;
        write_png(&dir.join(degraded_name(k)), &s.degraded)?;
        manifest.push_str(&format!("{} {} {}\n", clean_name(k), degraded_name(k), s.spec));
    }
    let path = dir.join(MANIFEST);
    let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.as_bytes()).map_err(|e| Error::io(&path, e))
}

/// Reads every pair listed in `dir`'s manifest, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<Vec<PairedSample>> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found"),
        ));
    }
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        let (Some(clean), Some(degraded)) = (parts.next(), parts.next()) else {
            return Err(image_err(&path, format!("line {} lacks two file names", i + 1)));
        };
        let spec_text = parts.collect::<Vec<_>>().join(" ");
        let spec = spec_text
            .parse::<DegradationSpec>()
            .map_err(|e| image_err(&path, format!("line {}: {e}", i + 1)))?;
        let clean = read_png(&dir.join(clean))?;
        let degraded = read_png(&dir.join(degraded))?;
        if clean.shape() != degraded.shape() {
            return Err(image_err(&path, format!("line {}: pair sizes differ", i + 1)));
        }
        out.push(PairedSample { clean, degraded, spec });
    }
    if out.is_empty() {
        return Err(image_err(&path, "manifest lists no samples"));
    }
    Ok(out)
}
