use std::io::Cursor;
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::label::LabelMap;

/// The 256-entry color table used by DAVIS-style annotations: bits of the
/// index are spread over the high bits of R, G and B in turn.
pub fn davis_palette() -> [[u8; 3]; 256] {
    let mut table = [[0u8; 3]; 256];
    for (i, rgb) in table.iter_mut().enumerate() {
        let mut c = i;
        for j in 0..8 {
            for (k, channel) in rgb.iter_mut().enumerate() {
                *channel |= (((c >> k) & 1) << (7 - j)) as u8;
            }
            c >>= 3;
        }
    }
    table
}

fn format_err(e: impl std::fmt::Display) -> Error {
    Error::Format(e.to_string())
}

/// Decodes an indexed (or 8-bit grayscale) PNG whose sample values are labels.
pub fn decode_mask_png(bytes: &[u8]) -> Result<LabelMap> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(format_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("mask image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(format_err)?;
    match (info.color_type, info.bit_depth) {
        (ColorType::Indexed, _) | (ColorType::Grayscale, BitDepth::Eight) => {}
        (c, d) => {
            return Err(Error::Format(format!(
                "mask must be an indexed or 8-bit grayscale PNG, got {c:?} at {d:?}"
            )))
        }
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let bits = info.bit_depth as usize;
    let per_byte = 8 / bits;
    let max = (1u16 << bits) - 1;
    let mut labels = Vec::with_capacity(w * h);
    for row in buf.chunks(info.line_size).take(h) {
        for x in 0..w {
            let byte = row[x / per_byte] as u16;
            let shift = 8 - bits * (x % per_byte + 1);
            labels.push(((byte >> shift) & max) as u8);
        }
    }
    LabelMap::new(h, w, labels)
}

/// Encodes labels as an 8-bit indexed PNG with the DAVIS palette.
pub fn encode_mask_png(map: &LabelMap) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let (h, w) = map.dims();
    let palette: Vec<u8> = davis_palette().iter().flatten().copied().collect();
    let mut encoder = png::Encoder::new(&mut out, w as u32, h as u32);
    encoder.set_color(ColorType::Indexed);
    encoder.set_depth(BitDepth::Eight);
    encoder.set_palette(palette);
    let mut writer = encoder.write_header().map_err(format_err)?;
    writer.write_image_data(map.labels()).map_err(format_err)?;
    writer.finish().map_err(format_err)?;
    Ok(out)
}

/// Decodes an ASCII PGM (P2) mask.
pub fn decode_mask_pgm(bytes: &[u8]) -> Result<LabelMap> {
    std::str::from_utf8(bytes)
        .map_err(|_| Error::Format("PGM mask is not ASCII".into()))
        .and_then(parse_pgm)
}

/// Decodes PNG (recognized by its signature) or ASCII PGM mask bytes.
pub fn decode_mask(bytes: &[u8]) -> Result<LabelMap> {
    if bytes.starts_with(b"\x89PNG") {
        decode_mask_png(bytes)
    } else {
        decode_mask_pgm(bytes)
    }
}

fn parse_pgm(text: &str) -> Result<LabelMap> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        return Err(Error::Format("PGM masks must be ASCII (P2)".into()));
    }
    let mut number = |what: &str| -> Result<usize> {
        let t = tokens
            .next()
            .ok_or_else(|| Error::Format(format!("PGM ends before {what}")))?;
        t.parse()
            .map_err(|_| Error::Format(format!("PGM {what} `{t}` is not a non-negative integer")))
    };
    let w = number("width")?;
    let h = number("height")?;
    let maxval = number("maxval")?;
    let labels = (0..w * h)
        .map(|_| {
            let v = number("pixel")?;
            if v > maxval || v > u8::MAX as usize {
                return Err(Error::Format(format!("label {v} out of range")));
            }
            Ok(v as u8)
        })
        .collect::<Result<Vec<_>>>()?;
    if tokens.next().is_some() {
        return Err(Error::Format("trailing data after PGM pixels".into()));
    }
    LabelMap::new(h, w, labels)
}

/// Encodes labels as ASCII PGM (P2).
pub fn encode_mask_pgm(map: &LabelMap) -> String {
    let (h, w) = map.dims();
    let maxval = map.labels().iter().copied().max().unwrap_or(0).max(1);
    let mut s = format!("P2\n{w} {h}\n{maxval}\n");
    for row in map.labels().chunks(w.max(1)) {
        let line: Vec<String> = row.iter().map(u8::to_string).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

fn is_pgm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

/// Reads a label mask from an indexed PNG or an ASCII PGM (`.pgm`).
pub fn read_mask(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = if is_pgm(path) {
        decode_mask_pgm(&bytes)
    } else {
        decode_mask_png(&bytes)
    };
    decoded.map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}

/// Writes a label mask; `.pgm` paths get ASCII PGM, anything else indexed PNG.
pub fn write_mask(map: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = if is_pgm(path) {
        encode_mask_pgm(map).into_bytes()
    } else {
        encode_mask_png(map)?
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
