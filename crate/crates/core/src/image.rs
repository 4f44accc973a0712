use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major interleaved float image with 1 or 3 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Image { width, height, channels, data }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// Single channel `c` as a grayscale image.
    pub fn channel(&self, c: usize) -> Image {
        Image::from_fn(self.width, self.height, 1, |x, y, _| self.get(x, y, c))
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::InvalidParameter(format!(
                "crop {x0},{y0} {w}x{h} outside {}x{} image",
                self.width, self.height
            )));
        }
        Ok(Image::from_fn(w, h, self.channels, |x, y, c| self.get(x0 + x, y0 + y, c)))
    }

    pub fn to_rgb(&self) -> Image {
        match self.channels {
            3 => self.clone(),
            _ => Image::from_fn(self.width, self.height, 3, |x, y, _| self.get(x, y, 0)),
        }
    }

    fn to_u8(v: f64) -> u8 {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| Self::to_u8(v)).collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            n => return Err(Error::InvalidParameter(format!("cannot write {n}-channel PNG"))),
        };
        image::save_buffer_with_format(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::format(path, e.to_string()))
    }

    /// Loads an 8-bit PNG as RGB (`channels = 3`) or luma (`channels = 1`).
    pub fn load_png(path: &Path, channels: usize) -> Result<Image> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
        let (width, height) = (img.width() as usize, img.height() as usize);
        let data: Vec<f64> = match channels {
            1 => img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
            3 => img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
            n => return Err(Error::InvalidParameter(format!("cannot read {n}-channel PNG"))),
        };
        Ok(Image { width, height, channels, data })
    }

    /// Portable float map, little-endian, rows stored bottom-up.
    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        let tag = match self.channels {
            1 => "Pf",
            3 => "PF",
            n => return Err(Error::InvalidParameter(format!("cannot write {n}-channel PFM"))),
        };
        let mut buf = format!("{tag}\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        let row = self.width * self.channels;
        for y in (0..self.height).rev() {
            for v in &self.data[y * row..(y + 1) * row] {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_pfm(path: &Path) -> Result<Image> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let mut header = Vec::new();
        while header.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
                return Err(Error::format(path, "truncated PFM header"));
            }
            header.extend(line.split_whitespace().map(str::to_owned));
        }
        let channels = match header[0].as_str() {
            "Pf" => 1,
            "PF" => 3,
            t => return Err(Error::format(path, format!("bad PFM tag {t:?}"))),
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, "bad PFM size"));
        let (width, height) = (parse(&header[1])?, parse(&header[2])?);
        let scale: f64 = header
            .get(3)
            .ok_or_else(|| Error::format(path, "missing PFM scale"))?
            .parse()
            .map_err(|_| Error::format(path, "bad PFM scale"))?;
        let mut raw = Vec::new();
        r.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
        let n = width * height * channels;
        if raw.len() < 4 * n {
            return Err(Error::format(path, "truncated PFM data"));
        }
        let vals: Vec<f64> = raw[..4 * n]
            .chunks_exact(4)
            .map(|b| {
                let b = [b[0], b[1], b[2], b[3]];
                (if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }) as f64
            })
            .collect();
        let row = width * channels;
        let mut data = Vec::with_capacity(n);
        for y in (0..height).rev() {
            data.extend_from_slice(&vals[y * row..(y + 1) * row]);
        }
        Ok(Image { width, height, channels, data })
    }
}
