use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::lang_vision::Image;

use super::DataError;

/// Writes an 8-bit RGB PNG. Channels are rounded to the nearest of 256
/// levels, so images quantized to `k/255` round-trip exactly.
pub fn write_png(path: &Path, image: &Image) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| DataError::io(path, e))?;
    let bytes: Vec<u8> = image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    w.write_image_data(&bytes).map_err(|e| DataError::io(path, e))?;
    w.finish().map_err(|e| DataError::io(path, e))
}

/// Reads an 8-bit RGB or RGBA PNG; alpha is dropped.
pub fn read_png(path: &Path) -> Result<Image, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let dec = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = dec.read_info().map_err(|e| DataError::io(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| DataError::Codec("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| DataError::io(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(DataError::Codec(format!("{}: only 8-bit PNGs are supported", path.display())));
    }
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(DataError::Codec(format!("{}: unsupported color type {other:?}", path.display()))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut img = Image::new(h, w);
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            let p = &row[x * channels..x * channels + 3];
            img.set_pixel(y, x, [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_images_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let mut img = Image::new(3, 5);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f64 / 255.0;
        }
        write_png(&path, &img).unwrap();
        assert_eq!(read_png(&path).unwrap(), img);
    }
}
