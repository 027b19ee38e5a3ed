use std::io::Cursor;

use image::codecs::png::{PngDecoder, PngEncoder};
use image::{DynamicImage, ExtendedColorType, ImageDecoder, ImageEncoder};
use zune_core::bytestream::ZCursor;
use zune_core::colorspace::ColorSpace;
use zune_core::options::DecoderOptions;
use zune_jpeg::JpegDecoder;

use super::{ImageBuffer, ImgError, PreprocessConfig};
use crate::profile::span_scope;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Jpeg,
    Png,
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];

pub fn sniff_format(bytes: &[u8]) -> Result<ImageFormat, ImgError> {
    if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
        Ok(ImageFormat::Jpeg)
    } else if bytes.starts_with(&PNG_SIGNATURE) {
        Ok(ImageFormat::Png)
    } else {
        Err(ImgError::Decode {
            offset: 0,
            reason: "unrecognized signature (expected JPEG or PNG)".into(),
        })
    }
}

fn fault(offset: usize, reason: impl Into<String>) -> ImgError {
    ImgError::Decode { offset, reason: reason.into() }
}

/// What the container walk learned before the compressed data.
#[derive(Debug, Clone, Copy)]
struct Layout {
    /// Offset of the first entropy-coded / deflate byte.
    data_offset: usize,
}

fn be16(b: &[u8], at: usize) -> usize {
    usize::from(u16::from_be_bytes([b[at], b[at + 1]]))
}

fn be32(b: &[u8], at: usize) -> usize {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]]) as usize
}

/// Walks JPEG marker segments up to the first scan.
fn scan_jpeg(b: &[u8]) -> Result<Layout, ImgError> {
    let mut pos = 2;
    let mut components = None;
    loop {
        if pos >= b.len() {
            return Err(fault(b.len(), "truncated before scan data"));
        }
        if b[pos] != 0xFF {
            return Err(fault(pos, format!("expected marker, found 0x{:02X}", b[pos])));
        }
        while pos < b.len() && b[pos] == 0xFF {
            pos += 1;
        }
        let Some(&marker) = b.get(pos) else {
            return Err(fault(b.len(), "truncated marker"));
        };
        let marker_at = pos - 1;
        pos += 1;
        match marker {
            0xD8 => return Err(fault(marker_at, "nested SOI marker")),
            0xD9 => return Err(fault(marker_at, "EOI before scan data")),
            0x01 | 0xD0..=0xD7 => continue,
            _ => {}
        }
        if pos + 2 > b.len() {
            return Err(fault(marker_at, "truncated segment length"));
        }
        let len = be16(b, pos);
        if len < 2 || pos + len > b.len() {
            return Err(fault(marker_at, format!("segment 0x{marker:02X} length {len} exceeds payload")));
        }
        let body = &b[pos + 2..pos + len];
        match marker {
            0xC0..=0xCF if !matches!(marker, 0xC4 | 0xC8 | 0xCC) => {
                if body.len() < 6 {
                    return Err(fault(marker_at, "short frame header"));
                }
                if body[0] != 8 {
                    return Err(ImgError::Unsupported(format!("{}-bit JPEG samples", body[0])));
                }
                if be16(body, 1) == 0 || be16(body, 3) == 0 {
                    return Err(fault(marker_at, "zero image dimension"));
                }
                components = Some(body[5]);
            }
            0xDA => {
                match components {
                    None => return Err(fault(marker_at, "scan before frame header")),
                    Some(1 | 3) => {}
                    Some(n) => {
                        return Err(ImgError::Unsupported(format!("{n}-component JPEG")))
                    }
                }
                return Ok(Layout { data_offset: pos + len });
            }
            _ => {}
        }
        pos += len;
    }
}

/// Walks PNG chunks, checking lengths and CRCs.
fn scan_png(b: &[u8]) -> Result<Layout, ImgError> {
    let mut pos = PNG_SIGNATURE.len();
    let mut data_offset = None;
    let mut first = true;
    loop {
        if pos + 8 > b.len() {
            return Err(fault(pos, "truncated chunk header"));
        }
        let len = be32(b, pos);
        let kind = &b[pos + 4..pos + 8];
        let end = pos
            .checked_add(12)
            .and_then(|p| p.checked_add(len))
            .filter(|&e| e <= b.len())
            .ok_or_else(|| fault(pos, format!("chunk length {len} exceeds payload")))?;
        let crc = be32(b, end - 4) as u32;
        if crc32fast::hash(&b[pos + 4..end - 4]) != crc {
            return Err(fault(pos, format!("CRC mismatch in {} chunk", String::from_utf8_lossy(kind))));
        }
        if first {
            if kind != b"IHDR" || len != 13 {
                return Err(fault(pos, "first chunk is not IHDR"));
            }
            let ihdr = &b[pos + 8..pos + 21];
            let (depth, color) = (ihdr[8], ihdr[9]);
            if depth != 8 {
                return Err(ImgError::Unsupported(format!("{depth}-bit PNG samples")));
            }
            match color {
                0 | 2 | 3 => {}
                4 | 6 => return Err(ImgError::Unsupported("PNG with alpha channel".into())),
                c => return Err(fault(pos + 17, format!("invalid PNG color type {c}"))),
            }
            first = false;
        } else if kind == b"IDAT" && data_offset.is_none() {
            data_offset = Some(pos + 8);
        } else if kind == b"IEND" {
            return data_offset
                .map(|data_offset| Layout { data_offset })
                .ok_or_else(|| fault(pos, "no IDAT chunk"));
        }
        pos = end;
    }
}

fn scan(bytes: &[u8]) -> Result<(ImageFormat, Layout), ImgError> {
    let format = sniff_format(bytes)?;
    let layout = match format {
        ImageFormat::Jpeg => scan_jpeg(bytes)?,
        ImageFormat::Png => scan_png(bytes)?,
    };
    Ok((format, layout))
}

/// Decodes a JPEG or PNG payload into 3-channel uint8 pixels.
///
/// With `decode_once` off the payload is decoded, re-encoded losslessly and
/// decoded again, which is the repeated decode/encode the recipe removes.
/// Each pass opens a `decode` span.
pub fn decode_image(bytes: &[u8], cfg: &PreprocessConfig) -> Result<ImageBuffer, ImgError> {
    let first = {
        let _g = span_scope("decode");
        decode_pass(bytes, cfg.simd_decode)?
    };
    if cfg.decode_once {
        return Ok(first);
    }
    let png = {
        let _g = span_scope("encode");
        encode_png(&first)?
    };
    let _g = span_scope("decode");
    decode_pass(&png, cfg.simd_decode)
}

fn decode_pass(bytes: &[u8], direct: bool) -> Result<ImageBuffer, ImgError> {
    let (format, layout) = scan(bytes)?;
    let at_data = |e: &dyn std::fmt::Display| fault(layout.data_offset, e.to_string());
    match (format, direct) {
        (ImageFormat::Jpeg, true) => decode_jpeg_direct(bytes).map_err(|e| at_data(&e)),
        (ImageFormat::Png, true) => decode_png_direct(bytes).map_err(|e| at_data(&e)),
        (_, false) => decode_generic(bytes, format).map_err(|e| at_data(&e)),
    }
}

fn decode_jpeg_direct(bytes: &[u8]) -> Result<ImageBuffer, String> {
    let opts = DecoderOptions::default().jpeg_set_out_colorspace(ColorSpace::RGB);
    let mut dec = JpegDecoder::new_with_options(ZCursor::new(bytes), opts);
    dec.decode_headers().map_err(|e| format!("{e:?}"))?;
    let info = dec.info().ok_or("missing JPEG header info")?;
    let (w, h) = (u32::from(info.width), u32::from(info.height));
    let mut out = vec![0u8; w as usize * h as usize * 3];
    dec.decode_into(&mut out).map_err(|e| format!("{e:?}"))?;
    ImageBuffer::from_u8(w, h, 3, out).map_err(|e| e.to_string())
}

fn decode_png_direct(bytes: &[u8]) -> Result<ImageBuffer, String> {
    let dec = PngDecoder::new(Cursor::new(bytes)).map_err(|e| e.to_string())?;
    let (w, h) = dec.dimensions();
    let color = dec.color_type();
    let mut raw = vec![0u8; dec.total_bytes() as usize];
    dec.read_image(&mut raw).map_err(|e| e.to_string())?;
    let rgb = match color {
        image::ColorType::Rgb8 => raw,
        image::ColorType::L8 => raw.iter().flat_map(|&v| [v, v, v]).collect(),
        other => return Err(format!("unexpected PNG color type {other:?}")),
    };
    ImageBuffer::from_u8(w, h, 3, rgb).map_err(|e| e.to_string())
}

/// General-purpose route: format-agnostic decode into a dynamic image, a
/// conversion to RGB, and a per-pixel copy into the output buffer.
fn decode_generic(bytes: &[u8], format: ImageFormat) -> Result<ImageBuffer, String> {
    let fmt = match format {
        ImageFormat::Jpeg => image::ImageFormat::Jpeg,
        ImageFormat::Png => image::ImageFormat::Png,
    };
    let dynamic = image::load_from_memory_with_format(bytes, fmt).map_err(|e| e.to_string())?;
    let rgb = match dynamic {
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageLuma8(_) => dynamic.to_rgb8(),
        other => return Err(format!("unexpected decoded layout {:?}", other.color())),
    };
    let (w, h) = rgb.dimensions();
    let mut out = Vec::with_capacity(w as usize * h as usize * 3);
    for y in 0..h {
        for x in 0..w {
            out.extend_from_slice(&rgb.get_pixel(x, y).0);
        }
    }
    ImageBuffer::from_u8(w, h, 3, out).map_err(|e| e.to_string())
}

fn color_type(img: &ImageBuffer) -> ExtendedColorType {
    if img.channels() == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    }
}

pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>, ImgError> {
    let data = img.require_u8()?;
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(data, img.width(), img.height(), color_type(img))
        .map_err(|e| ImgError::Encode(e.to_string()))?;
    Ok(out)
}

pub fn encode_jpeg(img: &ImageBuffer, quality: u8) -> Result<Vec<u8>, ImgError> {
    let data = img.require_u8()?;
    let mut out = Vec::new();
    image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, quality)
        .write_image(data, img.width(), img.height(), color_type(img))
        .map_err(|e| ImgError::Encode(e.to_string()))?;
    Ok(out)
}
