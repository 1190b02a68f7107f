//! 8-bit RGB PNG import and export for `[3, H, W]` tensors in `[-1, 1]`.

use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// Byte to `[-1, 1]`.
pub fn byte_to_unit(b: u8) -> f32 {
    (b as f64 / 127.5 - 1.0) as f32
}

/// `[-1, 1]` to byte, clamped, rounding half to even.
pub fn unit_to_byte(v: f32) -> u8 {
    let x = ((v as f64).clamp(-1.0, 1.0) + 1.0) * 127.5;
    x.round_ties_even() as u8
}

pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let dec = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| Error::format(format!("png: {e}")))?;
    let info = reader.info();
    let (w, h) = (info.width as usize, info.height as usize);
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(format!("png: expected 8-bit RGB, found {:?} at {:?}", info.color_type, info.bit_depth)));
    }
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::format("png: image too large"))?];
    let frame = reader.next_frame(&mut buf).map_err(|e| Error::format(format!("png: {e}")))?;
    let px = &buf[..frame.buffer_size()];
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, rgb) in px.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = byte_to_unit(rgb[c]);
        }
    }
    Tensor::new([3, h, w], data)
}

pub fn encode_png(img: &Tensor) -> Result<Vec<u8>> {
    let s = img.shape();
    ensure!(s.len() == 3 && s[0] == 3, "image_io", "image must be [3, H, W], got {:?}", s);
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut px = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            px.push(unit_to_byte(img.data()[c * plane + i]));
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut wr = enc.write_header().map_err(|e| Error::format(format!("png: {e}")))?;
        wr.write_image_data(&px).map_err(|e| Error::format(format!("png: {e}")))?;
    }
    Ok(out)
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    decode_png(&std::fs::read(path)?)
}

pub fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    super::checkpoint::write_atomic(path, &encode_png(img)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_png(w: u32, h: u32, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, w, h);
            enc.set_color(color);
            enc.set_depth(depth);
            enc.write_header().unwrap().write_image_data(data).unwrap();
        }
        out
    }

    #[test]
    fn black_and_mid_gray() {
        let black = decode_png(&raw_png(2, 2, png::ColorType::Rgb, png::BitDepth::Eight, &[0; 12])).unwrap();
        assert!(black.data().iter().all(|&v| v == -1.0));
        assert!((byte_to_unit(128) - 0.00392).abs() < 1e-5);
    }

    #[test]
    fn export_import_is_byte_identical() {
        let data: Vec<u8> = (0..=255u8).cycle().take(3 * 16 * 16).collect();
        let png_bytes = raw_png(16, 16, png::ColorType::Rgb, png::BitDepth::Eight, &data);
        let t = decode_png(&png_bytes).unwrap();
        let again = decode_png(&encode_png(&t).unwrap()).unwrap();
        assert_eq!(again, t);
        assert!((0..=255u8).all(|b| unit_to_byte(byte_to_unit(b)) == b));
    }

    #[test]
    fn rounding_is_half_to_even() {
        // 0.0 sits at 127.5, the only exact tie reachable from f32
        assert_eq!(unit_to_byte(0.0), 128);
        assert_eq!(unit_to_byte(3.0), 255);
        assert_eq!(unit_to_byte(-3.0), 0);
    }

    #[test]
    fn wrong_formats_rejected() {
        assert!(matches!(decode_png(b"not a png"), Err(Error::Format(_))));
        let gray = raw_png(2, 2, png::ColorType::Grayscale, png::BitDepth::Eight, &[0; 4]);
        assert!(matches!(decode_png(&gray), Err(Error::Format(_))));
        let deep = raw_png(1, 1, png::ColorType::Rgb, png::BitDepth::Sixteen, &[0; 6]);
        assert!(matches!(decode_png(&deep), Err(Error::Format(_))));
    }
}
