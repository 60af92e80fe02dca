//! Real-valued raster images and PPM/PNG codecs.
//!
//! Pixels are stored row-major with interleaved channels (H×W×C), each value
//! nominally in `[0, 1]`. Mean-subtracted images may leave that range.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Luma weights used for every grayscale conversion in the crate.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, pixel: &[f64]) -> Self {
        let channels = pixel.len();
        let mut data = Vec::with_capacity(height * width * channels);
        for _ in 0..height * width {
            data.extend_from_slice(pixel);
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels || channels == 0 {
            return Err(Error::invalid(format!(
                "image buffer of {}x{}x{} needs {} values, got {}",
                height,
                width,
                channels,
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Single-channel luma image. Grayscale input is returned unchanged.
    pub fn to_gray(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
            .collect();
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Plane `c` as a single-channel image.
    pub fn channel(&self, c: usize) -> ImageBuffer {
        let data = self
            .data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect();
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Replicate a single-channel image into `channels` identical planes.
    pub fn replicate(&self, channels: usize) -> ImageBuffer {
        assert_eq!(self.channels, 1, "replicate expects a single-channel image");
        let mut data = Vec::with_capacity(self.data.len() * channels);
        for &v in &self.data {
            data.extend(std::iter::repeat_n(v, channels));
        }
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels,
            data,
        }
    }

    /// Mirror left-to-right.
    pub fn flip_horizontal(&self) -> ImageBuffer {
        let mut out = ImageBuffer::new(self.height, self.width, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                let src = self.pixel(y, self.width - 1 - x);
                out.pixel_mut(y, x).copy_from_slice(src);
            }
        }
        out
    }

    /// Bilinear resize with half-pixel centers; aspect ratio is not preserved.
    pub fn resize(&self, height: usize, width: usize) -> ImageBuffer {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let axis = |i: usize, scale: f64, len: usize| {
            let f = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = f.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, f - i0 as f64)
        };
        let mut out = ImageBuffer::new(height, width, self.channels);
        for y in 0..height {
            let (y0, y1, fy) = axis(y, sy, self.height);
            for x in 0..width {
                let (x0, x1, fx) = axis(x, sx, self.width);
                for c in 0..self.channels {
                    let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
                    let bot = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
                    out.set(y, x, c, top * (1.0 - fy) + bot * fy);
                }
            }
        }
        out
    }

    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<ImageBuffer> {
        if x + width > self.width || y + height > self.height {
            return Err(Error::invalid(format!(
                "crop {}x{} at ({},{}) exceeds {}x{} image",
                width, height, x, y, self.width, self.height
            )));
        }
        let mut out = ImageBuffer::new(height, width, self.channels);
        for r in 0..height {
            let src = ((y + r) * self.width + x) * self.channels;
            let dst = r * width * self.channels;
            out.data[dst..dst + width * self.channels]
                .copy_from_slice(&self.data[src..src + width * self.channels]);
        }
        Ok(out)
    }

    /// Channel-planar copy (C×H×W), the layout the network consumes.
    pub fn to_planar(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * self.channels];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + i] = v;
            }
        }
        out
    }

    pub fn from_planar(
        height: usize,
        width: usize,
        channels: usize,
        planar: &[f64],
    ) -> Result<Self> {
        let plane = height * width;
        if planar.len() != plane * channels {
            return Err(Error::invalid(
                "planar buffer length does not match image dimensions",
            ));
        }
        let mut img = ImageBuffer::new(height, width, channels);
        for c in 0..channels {
            for i in 0..plane {
                img.data[i * channels + c] = planar[c * plane + i];
            }
        }
        Ok(img)
    }

    pub fn mean_pixel(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (a, v) in acc.iter_mut().zip(px) {
                *a += v;
            }
        }
        let n = (self.height * self.width).max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// 8-bit RGB bytes (gray is replicated), values clamped to `[0, 1]` first.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.height * self.width * 3);
        for px in self.data.chunks_exact(self.channels) {
            for c in 0..3 {
                let v = if self.channels == 1 {
                    px[0]
                } else {
                    px[c.min(self.channels - 1)]
                };
                out.push(quantize(v));
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(Error::invalid(
                "rgb8 buffer length does not match image dimensions",
            ));
        }
        let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Self {
            height,
            width,
            channels: 3,
            data,
        })
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode as binary PPM (P6, maxval 255).
pub fn encode_ppm(img: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(&img.to_rgb8());
    out
}

/// Decode binary PPM (P6) or PGM (P5) with maxval ≤ 255.
pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<ImageBuffer, String> {
    let mut pos = 0usize;
    let mut next_token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = next_token()?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(format!("unsupported magic {other:?}")),
    };
    let parse = |t: String, what: &str| t.parse::<usize>().map_err(|_| format!("bad {what} {t:?}"));
    let width = parse(next_token()?, "width")?;
    let height = parse(next_token()?, "height")?;
    let maxval = parse(next_token()?, "maxval")?;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * channels;
    if bytes.len() < pos + need {
        return Err(format!(
            "raster truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        ));
    }
    let raster = &bytes[pos..pos + need];
    let data: Vec<f64> = raster.iter().map(|&b| b as f64 / maxval as f64).collect();
    let img = ImageBuffer::from_vec(height, width, channels, data).map_err(|e| e.to_string())?;
    Ok(if channels == 1 { img.replicate(3) } else { img })
}

pub fn decode_png(bytes: &[u8]) -> std::result::Result<ImageBuffer, String> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or("png too large")?];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let channels = info.color_type.samples();
    let mut rgb = Vec::with_capacity(w * h * 3);
    for px in bytes.chunks_exact(channels) {
        match channels {
            1 | 2 => rgb.extend_from_slice(&[px[0]; 3]),
            _ => rgb.extend_from_slice(&px[..3]),
        }
    }
    ImageBuffer::from_rgb8(h, w, &rgb).map_err(|e| e.to_string())
}

pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::invalid(e.to_string()))?;
        writer
            .write_image_data(&img.to_rgb8())
            .map_err(|e| Error::invalid(e.to_string()))?;
    }
    Ok(out)
}

/// Decode by content sniffing: PNG signature, else PNM.
pub fn decode(bytes: &[u8]) -> std::result::Result<ImageBuffer, String> {
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(bytes)
    } else {
        decode_pnm(bytes)
    }
}

pub fn load(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::Decode {
        path: path.to_path_buf(),
        reason,
    })
}

/// Write PNG when the extension says so, PPM otherwise.
pub fn save(img: &ImageBuffer, path: &Path) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("png") => encode_png(img)?,
        _ => encode_ppm(img),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Tile images (already the same size) into a grid, `cols` per row.
pub fn montage(tiles: &[ImageBuffer], cols: usize, gap: usize) -> Option<ImageBuffer> {
    let first = tiles.first()?;
    let (th, tw) = (first.height(), first.width());
    let cols = cols.max(1).min(tiles.len());
    let rows = tiles.len().div_ceil(cols);
    let mut out = ImageBuffer::filled(
        rows * (th + gap) + gap,
        cols * (tw + gap) + gap,
        &[1.0, 1.0, 1.0],
    );
    for (i, tile) in tiles.iter().enumerate() {
        let tile = if tile.channels() == 1 {
            tile.replicate(3)
        } else {
            tile.clone()
        };
        let tile = tile.resize(th, tw);
        let (oy, ox) = (gap + (i / cols) * (th + gap), gap + (i % cols) * (tw + gap));
        for y in 0..th {
            for x in 0..tw {
                out.pixel_mut(oy + y, ox + x)
                    .copy_from_slice(tile.pixel(y, x));
            }
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_mirrors_row() {
        let img = ImageBuffer::from_vec(1, 2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(img.flip_horizontal().data(), &[1.0, 0.0]);
    }

    #[test]
    fn ppm_roundtrip_is_exact_on_8bit_values() {
        let bytes: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = ImageBuffer::from_rgb8(3, 4, &bytes).unwrap();
        let decoded = decode(&encode_ppm(&img)).unwrap();
        assert_eq!(decoded.to_rgb8(), bytes);
        let decoded = decode(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(decoded.to_rgb8(), bytes);
    }

    #[test]
    fn pnm_header_comments_and_truncation() {
        let mut ok = b"P6\n# comment\n2 1\n255\n".to_vec();
        ok.extend_from_slice(&[255, 0, 0, 0, 255, 0]);
        let img = decode(&ok).unwrap();
        assert_eq!(img.pixel(0, 1), &[0.0, 1.0, 0.0]);
        assert!(decode(&ok[..ok.len() - 1]).is_err());
        assert!(decode(b"P3\n1 1\n255\n0 0 0").is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ImageBuffer::filled(5, 7, &[0.25, 0.5, 0.75]);
        let r = img.resize(3, 11);
        assert!(r.data().chunks(3).all(|p| p == [0.25, 0.5, 0.75]));
        assert_eq!(img.resize(5, 7), img);
    }

    #[test]
    fn planar_roundtrip() {
        let img = ImageBuffer::from_vec(2, 2, 3, (0..12).map(f64::from).collect()).unwrap();
        let planar = img.to_planar();
        assert_eq!(&planar[..4], &[0.0, 3.0, 6.0, 9.0]);
        assert_eq!(ImageBuffer::from_planar(2, 2, 3, &planar).unwrap(), img);
    }
}
