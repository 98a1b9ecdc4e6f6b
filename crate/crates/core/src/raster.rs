//! Row-major 2D maps (normal, depth, mask, color images) and their file encodings.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Raster<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Raster {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Raster<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::mismatch(width * height, data.len()));
        }
        Ok(Raster {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    pub fn same_size<U>(&self, other: &Raster<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Raster<U> {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

pub type RgbMap = Raster<[f32; 3]>;
pub type ScalarMap = Raster<f32>;

/// `round(255 * (n + 1) / 2)` per channel.
pub fn encode_normal(n: [f32; 3]) -> [u8; 3] {
    n.map(|c| (255.0 * (c.clamp(-1.0, 1.0) + 1.0) * 0.5).round() as u8)
}

pub fn decode_normal(px: [u8; 3]) -> [f32; 3] {
    px.map(|c| c as f32 / 255.0 * 2.0 - 1.0)
}

pub fn normals_to_image(map: &Raster<[f32; 3]>) -> RgbImage {
    let mut img = RgbImage::new(map.width as u32, map.height as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        *px = Rgb(encode_normal(map.data[i]));
    }
    img
}

pub fn rgb_to_image(map: &RgbMap) -> RgbImage {
    let mut img = RgbImage::new(map.width as u32, map.height as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        *px = Rgb(map.data[i].map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    img
}

pub fn image_to_rgb(img: &RgbImage) -> RgbMap {
    Raster {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img
            .pixels()
            .map(|p| p.0.map(|c| c as f32 / 255.0))
            .collect(),
    }
}

/// Values in `[0, 1]` to 8-bit gray.
pub fn scalar_to_gray(map: &ScalarMap) -> GrayImage {
    GrayImage::from_raw(
        map.width as u32,
        map.height as u32,
        map.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect(),
    )
    .expect("buffer size matches")
}

pub fn gray_to_scalar(img: &GrayImage) -> ScalarMap {
    Raster {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
    }
}

pub fn save_png_rgb(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    img.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
    Ok(())
}

pub fn save_png_gray(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    img.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    Ok(image::open(path.as_ref())?.to_rgb8())
}

pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    Ok(image::open(path.as_ref())?.to_luma8())
}

/// Grayscale little-endian PFM (`Pf`, negative scale), rows stored bottom-up.
pub fn write_pfm(map: &ScalarMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut body = format!("Pf\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    for y in (0..map.height).rev() {
        for x in 0..map.width {
            body.extend_from_slice(&map.at(x, y).to_le_bytes());
        }
    }
    out.write_all(&body)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<ScalarMap> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    // three whitespace-terminated header lines
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields.len() < 4 || fields[0] != "Pf" {
        return Err(Error::Format("not a grayscale PFM".into()));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PFM size {s:?}")))
    };
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let scale: f32 = fields[3]
        .parse()
        .map_err(|_| Error::Format("bad PFM scale".into()))?;
    let payload = bytes.get(pos..).unwrap_or_default();
    if payload.len() != w * h * 4 {
        return Err(Error::Format(format!(
            "PFM payload has {} bytes, expected {}",
            payload.len(),
            w * h * 4
        )));
    }
    let mut data = vec![0.0f32; w * h];
    for (k, b) in payload.chunks_exact(4).enumerate() {
        let arr: [u8; 4] = b.try_into().unwrap();
        let v = if scale < 0.0 {
            f32::from_le_bytes(arr)
        } else {
            f32::from_be_bytes(arr)
        };
        let (x, row) = (k % w, k / w);
        data[(h - 1 - row) * w + x] = v;
    }
    Raster::from_vec(w, h, data)
}
