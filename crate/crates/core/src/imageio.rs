//! Binary Netpbm images (P6 colour, P5 grey), palettes and label rendering.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Shape, Tensor};

/// An 8-bit RGB raster, row-major and interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

struct Header {
    width: usize,
    height: usize,
    payload: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Image(format!(
            "bad magic, expected {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // Whitespace and `#` comments may separate header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Image(format!("header field {} is not a number", i + 1)));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Image("header number out of range".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Image("missing whitespace after maxval".into()));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Image(format!("maxval {maxval} is not supported, only 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Image("image has zero area".into()));
    }
    Ok(Header {
        width,
        height,
        payload: pos + 1,
    })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h.width * h.height * channels;
    let data = &bytes[h.payload..];
    if data.len() < need {
        return Err(Error::Image(format!(
            "truncated payload: {} of {need} bytes",
            data.len()
        )));
    }
    if data.len() > need {
        return Err(Error::Image(format!("{} trailing bytes after payload", data.len() - need)));
    }
    Ok(data)
}

/// Binary P6 to a `3×H×W` tensor scaled into `[0, 1]`.
pub fn read_ppm(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes, b"P6")?;
    let data = payload(bytes, &h, 3)?;
    Tensor::from_fn(Shape::chw(3, h.height, h.width), |_, c, y, x| {
        data[(y * h.width + x) * 3 + c] as f32 / 255.0
    })
}

/// A `3×H×W` tensor in `[0, 1]` to binary P6, rounding to the nearest byte.
pub fn write_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::Image(format!("expected a 3-channel image, got {s}")));
    }
    let mut pixels = Vec::with_capacity(3 * s.plane());
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                pixels.push((image.at(0, c, y, x) * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(RgbImage {
        height: s.h,
        width: s.w,
        pixels,
    }
    .to_ppm())
}

/// Label map to binary P5 holding the raw class indices.
pub fn write_pgm(map: &LabelMap) -> Result<Vec<u8>> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    for &l in &map.labels {
        out.push(u8::try_from(l).map_err(|_| Error::Image(format!("label {l} does not fit in a byte")))?);
    }
    Ok(out)
}

pub fn read_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let h = parse_header(bytes, b"P5")?;
    let data = payload(bytes, &h, 1)?;
    LabelMap::new(h.height, h.width, data.iter().map(|&b| b as u32).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    pub colors: Vec<[u8; 3]>,
}

impl Palette {
    /// Distinct colours spread by interleaving the bits of the class index.
    pub fn generated(classes: usize) -> Self {
        let colors = (0..classes)
            .map(|i| {
                let mut rgb = [0u8; 3];
                let mut id = i;
                for bit in (0..8).rev() {
                    for (ch, v) in rgb.iter_mut().enumerate() {
                        *v |= (((id >> ch) & 1) as u8) << bit;
                    }
                    id >>= 3;
                }
                rgb
            })
            .collect();
        Palette { colors }
    }

    /// One `r g b` line per class; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut colors = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Parse {
                line: n + 1,
                column: 1,
                message: "expected three values 0-255".into(),
            };
            if parts.len() != 3 {
                return Err(bad());
            }
            let mut rgb = [0u8; 3];
            for (v, p) in rgb.iter_mut().zip(&parts) {
                *v = p.parse().map_err(|_| bad())?;
            }
            colors.push(rgb);
        }
        if colors.is_empty() {
            return Err(Error::Image("palette has no colours".into()));
        }
        Ok(Palette { colors })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for [r, g, b] in &self.colors {
            let _ = writeln!(s, "{r} {g} {b}");
        }
        s
    }
}

/// Palette lookup per pixel.
pub fn colorize(map: &LabelMap, palette: &Palette) -> Result<RgbImage> {
    let mut pixels = Vec::with_capacity(3 * map.labels.len());
    for &l in &map.labels {
        let rgb = palette.colors.get(l as usize).ok_or_else(|| {
            Error::Image(format!("label {l} has no colour in a {}-entry palette", palette.colors.len()))
        })?;
        pixels.extend_from_slice(rgb);
    }
    Ok(RgbImage {
        height: map.height,
        width: map.width,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel() {
        let t = read_ppm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(t.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn comments_are_whitespace() {
        let plain = read_ppm(b"P6 2 1 255\n\x01\x02\x03\x04\x05\x06").unwrap();
        let commented = read_ppm(b"P6\n# made by hand\n2 1\n# depth\n255\n\x01\x02\x03\x04\x05\x06").unwrap();
        assert_eq!(plain, commented);
    }

    #[test]
    fn ppm_round_trip() {
        let mut bytes = b"P6\n3 2\n255\n".to_vec();
        bytes.extend((0..18u8).map(|b| b.wrapping_mul(37)));
        assert_eq!(write_ppm(&read_ppm(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn rejects_malformed() {
        assert!(read_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(read_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(read_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
        assert!(read_ppm(b"P6\n1 1\n255").is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let map = LabelMap::new(2, 2, vec![0, 1, 18, 3]).unwrap();
        assert_eq!(read_pgm(&write_pgm(&map).unwrap()).unwrap(), map);
        assert!(write_pgm(&LabelMap::filled(1, 1, 256).unwrap()).is_err());
    }

    #[test]
    fn palette_and_colorize() {
        let p = Palette::generated(19);
        assert_eq!(p.colors[0], [0, 0, 0]);
        let distinct: std::collections::HashSet<_> = p.colors.iter().collect();
        assert_eq!(distinct.len(), 19);
        assert_eq!(Palette::parse(&p.to_text()).unwrap(), p);

        let checker = LabelMap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let pal = Palette::parse("10 20 30\n# second\n40 50 60\n").unwrap();
        let img = colorize(&checker, &pal).unwrap();
        assert_eq!(img.pixels, vec![10, 20, 30, 40, 50, 60, 40, 50, 60, 10, 20, 30]);
        assert!(colorize(&LabelMap::filled(1, 1, 2).unwrap(), &pal).is_err());
        assert!(Palette::parse("1 2\n").is_err());
    }
}
