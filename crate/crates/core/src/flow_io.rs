//! Middlebury `.flo` files, color-wheel rendering of flow, and binary PPM images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::field::FlowField;

/// `.flo` header tag, the float whose bytes read "PIEH".
pub const FLO_MAGIC: f32 = 202021.25;
const FLO_HEADER: usize = 12;

/// Parses a `.flo` buffer; values are loaded bit for bit.
pub fn read_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < FLO_HEADER {
        return Err(Error::Length { expected: FLO_HEADER, found: bytes.len() });
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let magic = f32::from_le_bytes(word(0));
    if magic.to_bits() != FLO_MAGIC.to_bits() {
        return Err(Error::Format(format!("bad .flo magic {magic} (expected {FLO_MAGIC})")));
    }
    let (w, h) = (i32::from_le_bytes(word(4)), i32::from_le_bytes(word(8)));
    if w <= 0 || h <= 0 {
        return Err(Error::Format(format!("bad .flo extent {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(FLO_HEADER))
        .ok_or_else(|| Error::Format(format!(".flo extent {w}x{h} overflows")))?;
    if bytes.len() != expected {
        return Err(Error::Length { expected, found: bytes.len() });
    }
    let n = w * h;
    let (mut u, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for px in bytes[FLO_HEADER..].chunks_exact(8) {
        u.push(f32::from_le_bytes([px[0], px[1], px[2], px[3]]));
        v.push(f32::from_le_bytes([px[4], px[5], px[6], px[7]]));
    }
    FlowField::new(w, h, u, v)
}

/// Encodes a field as `.flo`; non-finite values are rejected.
pub fn write_flo(field: &FlowField) -> Result<Vec<u8>> {
    if !field.is_finite() {
        return Err(Error::Data("flow field contains NaN or infinite values".into()));
    }
    let (w, h) = (field.width(), field.height());
    let dim = |x: usize| i32::try_from(x).map_err(|_| Error::Data(format!("extent {x} exceeds the .flo range")));
    let mut out = Vec::with_capacity(FLO_HEADER + 8 * w * h);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&dim(w)?.to_le_bytes());
    out.extend_from_slice(&dim(h)?.to_le_bytes());
    for (a, b) in field.u().iter().zip(field.v()) {
        out.extend_from_slice(&a.to_le_bytes());
        out.extend_from_slice(&b.to_le_bytes());
    }
    Ok(out)
}

pub fn read_flo_file(path: &Path) -> Result<FlowField> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_flo(&bytes).map_err(|e| Error::Load { path: path.to_path_buf(), message: e.to_string() })
}

pub fn write_flo_file(path: &Path, field: &FlowField) -> Result<()> {
    std::fs::write(path, write_flo(field)?).map_err(|e| Error::io(path, e))
}

/// 8-bit interleaved RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape(format!("image extent {width}x{height} must be positive")));
        }
        if data.len() != 3 * width * height {
            return Err(Error::shape(format!(
                "{} bytes do not fill a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::new(width, height, rgb.repeat(width * height))
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Binary P6 with header `P6\n<w> <h>\n255\n`.
pub fn write_ppm(img: &RgbImage) -> Result<Vec<u8>> {
    if img.width == 0 || img.height == 0 || img.data.len() != 3 * img.width * img.height {
        return Err(Error::shape(format!(
            "cannot encode a {}x{} image holding {} bytes",
            img.width,
            img.height,
            img.data.len()
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    Ok(out)
}

/// Reads binary P6 with maxval 255; `#` comments in the header are skipped.
pub fn read_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut pos = 0;
    let mut fields = [0usize; 3];
    let token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&mut pos)? != "P6" {
        return Err(Error::Format("not a binary PPM (P6) file".into()));
    }
    for f in fields.iter_mut() {
        let t = token(&mut pos)?;
        *f = t.parse().map_err(|_| Error::Format(format!("bad PPM header field {t:?}")))?;
    }
    if fields[2] != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {}", fields[2])));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let (w, h) = (fields[0], fields[1]);
    let need = 3 * w * h;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != need {
        return Err(Error::Length { expected: pos + need, found: bytes.len() });
    }
    RgbImage::new(w, h, raster.to_vec())
}

pub fn read_ppm_file(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_ppm(&bytes).map_err(|e| Error::Load { path: path.to_path_buf(), message: e.to_string() })
}

pub fn write_ppm_file(path: &Path, img: &RgbImage) -> Result<()> {
    std::fs::write(path, write_ppm(img)?).map_err(|e| Error::io(path, e))
}

const WHEEL_SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

/// The 55-entry Middlebury color wheel (red → yellow → green → cyan → blue → magenta).
pub fn color_wheel() -> Vec<[u8; 3]> {
    let ramp = |i: usize, n: usize| (255 * i / n) as u8;
    let mut wheel = Vec::with_capacity(55);
    let [ry, yg, gc, cb, bm, mr] = WHEEL_SEGMENTS;
    wheel.extend((0..ry).map(|i| [255, ramp(i, ry), 0]));
    wheel.extend((0..yg).map(|i| [255 - ramp(i, yg), 255, 0]));
    wheel.extend((0..gc).map(|i| [0, 255, ramp(i, gc)]));
    wheel.extend((0..cb).map(|i| [0, 255 - ramp(i, cb), 255]));
    wheel.extend((0..bm).map(|i| [ramp(i, bm), 0, 255]));
    wheel.extend((0..mr).map(|i| [255, 0, 255 - ramp(i, mr)]));
    wheel
}

/// Renders flow with the color wheel: hue encodes direction, saturation encodes
/// `min(1, ‖flow‖ / max_norm)`. `max_norm` defaults to the field's largest norm; zero
/// flow is white.
pub fn flow_to_color(field: &FlowField, max_norm: Option<f64>) -> RgbImage {
    let wheel = color_wheel();
    let ncols = wheel.len();
    let scale = max_norm.unwrap_or_else(|| field.max_norm());
    let mut data = Vec::with_capacity(3 * field.width() * field.height());
    for (&u, &v) in field.u().iter().zip(field.v()) {
        let (u, v) = (u as f64, v as f64 + 0.0);
        let rad = if scale > 0.0 { (u.hypot(v) / scale).min(1.0) } else { 0.0 };
        let a = (-v).atan2(-u) / std::f64::consts::PI;
        let fk = (a + 1.0) / 2.0 * (ncols - 1) as f64;
        let k0 = (fk.floor() as usize).min(ncols - 1);
        let k1 = (k0 + 1) % ncols;
        let f = fk - k0 as f64;
        for c in 0..3 {
            let c0 = wheel[k0][c] as f64 / 255.0;
            let c1 = wheel[k1][c] as f64 / 255.0;
            let col = 1.0 - rad * (1.0 - ((1.0 - f) * c0 + f * c1));
            data.push((255.0 * col).floor().clamp(0.0, 255.0) as u8);
        }
    }
    RgbImage { width: field.width(), height: field.height(), data }
}
