use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit interleaved RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&fill);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Sets a pixel if it lies inside the raster.
    pub fn put(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.set(x as usize, y as usize, rgb);
        }
    }

    /// `(1, 3, h, w)` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut t = Tensor::zeros(&[1, 3, self.height, self.width]);
        let d = t.data_mut();
        for p in 0..plane {
            for c in 0..3 {
                d[c * plane + p] = self.data[p * 3 + c] as f32 / 255.0;
            }
        }
        t
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode_ppm())
            .map_err(|e| Error::io(path, e))
    }

    /// Reads a binary PPM (`P6`, maxval 255) or an uncompressed 24-bit BMP.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let res = if bytes.starts_with(b"P6") {
            decode_ppm(&bytes)
        } else if bytes.starts_with(b"BM") {
            decode_bmp(&bytes)
        } else {
            Err("unrecognised image format (expected binary PPM or 24-bit BMP)".to_string())
        };
        res.map_err(|reason| Error::format(path, reason))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err("truncated PPM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    i += 1; // single whitespace before the raster
    if fields[0] != "P6" {
        return Err(format!("unsupported PPM magic {}", fields[0]));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| format!("bad PPM {what} {s:?}"))
    };
    let width = parse(&fields[1], "width")?;
    let height = parse(&fields[2], "height")?;
    if parse(&fields[3], "maxval")? != 255 {
        return Err(format!("unsupported PPM maxval {}", fields[3]));
    }
    if width == 0 || height == 0 {
        return Err("zero-sized image".into());
    }
    let need = width * height * 3;
    if bytes.len() < i + need {
        return Err(format!(
            "PPM raster truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(i)
        ));
    }
    Ok(Image {
        width,
        height,
        data: bytes[i..i + need].to_vec(),
    })
}

pub fn decode_bmp(bytes: &[u8]) -> std::result::Result<Image, String> {
    let u32_at = |o: usize| -> std::result::Result<u32, String> {
        bytes
            .get(o..o + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| "truncated BMP header".to_string())
    };
    let u16_at = |o: usize| -> std::result::Result<u16, String> {
        bytes
            .get(o..o + 2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .ok_or_else(|| "truncated BMP header".to_string())
    };
    let offset = u32_at(10)? as usize;
    let width = u32_at(18)? as i32;
    let height = u32_at(22)? as i32;
    let bpp = u16_at(28)?;
    let compression = u32_at(30)?;
    if bpp != 24 || compression != 0 {
        return Err(format!(
            "only uncompressed 24-bit BMP is supported (bpp {bpp}, compression {compression})"
        ));
    }
    if width <= 0 || height == 0 {
        return Err("zero-sized image".into());
    }
    let (w, h) = (width as usize, height.unsigned_abs() as usize);
    let stride = (w * 3).div_ceil(4) * 4;
    if bytes.len() < offset + stride * h {
        return Err("BMP pixel data truncated".into());
    }
    let mut img = Image::new(w, h, [0, 0, 0]);
    for row in 0..h {
        let y = if height > 0 { h - 1 - row } else { row };
        let base = offset + row * stride;
        for x in 0..w {
            let p = base + x * 3;
            img.set(x, y, [bytes[p + 2], bytes[p + 1], bytes[p]]);
        }
    }
    Ok(img)
}

/// Encodes an uncompressed bottom-up 24-bit BMP.
pub fn encode_bmp(img: &Image) -> Vec<u8> {
    let stride = (img.width * 3).div_ceil(4) * 4;
    let size = 54 + stride * img.height;
    let mut out = Vec::with_capacity(size);
    out.extend_from_slice(b"BM");
    out.extend_from_slice(&(size as u32).to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    out.extend_from_slice(&54u32.to_le_bytes());
    out.extend_from_slice(&40u32.to_le_bytes());
    out.extend_from_slice(&(img.width as i32).to_le_bytes());
    out.extend_from_slice(&(img.height as i32).to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&24u16.to_le_bytes());
    out.extend_from_slice(&[0; 24]);
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            let [r, g, b] = img.get(x, y);
            out.extend_from_slice(&[b, g, r]);
        }
        out.resize(out.len() + stride - img.width * 3, 0);
    }
    out
}

/// 3×5 glyphs, one bit per pixel, rows top to bottom.
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_lowercase() {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        'a' => [2, 5, 7, 5, 5],
        'b' => [6, 5, 6, 5, 6],
        'c' => [3, 4, 4, 4, 3],
        'd' => [6, 5, 5, 5, 6],
        'e' => [7, 4, 6, 4, 7],
        'f' => [7, 4, 6, 4, 4],
        'g' => [3, 4, 5, 5, 3],
        'h' => [5, 5, 7, 5, 5],
        'i' => [7, 2, 2, 2, 7],
        'j' => [1, 1, 1, 5, 2],
        'k' => [5, 5, 6, 5, 5],
        'l' => [4, 4, 4, 4, 7],
        'm' => [5, 7, 7, 5, 5],
        'n' => [6, 5, 5, 5, 5],
        'o' => [2, 5, 5, 5, 2],
        'p' => [6, 5, 6, 4, 4],
        'q' => [2, 5, 5, 6, 3],
        'r' => [6, 5, 6, 5, 5],
        's' => [3, 4, 2, 1, 6],
        't' => [7, 2, 2, 2, 2],
        'u' => [5, 5, 5, 5, 7],
        'v' => [5, 5, 5, 5, 2],
        'w' => [5, 5, 7, 7, 5],
        'x' => [5, 5, 2, 5, 5],
        'y' => [5, 5, 2, 2, 2],
        'z' => [7, 1, 2, 4, 7],
        _ => [0; 5],
    }
}

/// Draws `text` with its top-left corner at `(x, y)`.
pub fn draw_text(img: &mut Image, x: i64, y: i64, text: &str, rgb: [u8; 3]) {
    for (i, c) in text.chars().enumerate() {
        let g = glyph(c);
        let ox = x + 4 * i as i64;
        for (row, bits) in g.iter().enumerate() {
            for col in 0..3 {
                if bits >> (2 - col) & 1 == 1 {
                    img.put(ox + col as i64, y + row as i64, rgb);
                }
            }
        }
    }
}

/// One-pixel rectangle outline.
pub fn draw_rect(img: &mut Image, x1: i64, y1: i64, x2: i64, y2: i64, rgb: [u8; 3]) {
    for x in x1..=x2 {
        img.put(x, y1, rgb);
        img.put(x, y2, rgb);
    }
    for y in y1..=y2 {
        img.put(x1, y, rgb);
        img.put(x2, y, rgb);
    }
}
