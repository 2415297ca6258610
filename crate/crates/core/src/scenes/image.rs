use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape("image", format!("{} values for {width}x{height} RGB", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Binary PPM (P6), 8 bits per channel.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.data.len() + 20);
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        out.extend(self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        let mut reader = BufReader::new(file);
        let bad = |msg: &str| Error::Parse { path: path.to_path_buf(), line: 1, msg: msg.to_string() };
        let mut header = Vec::new();
        while header.len() < 4 {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                return Err(bad("truncated PPM header"));
            }
            let line = line.split('#').next().unwrap_or("");
            header.extend(line.split_whitespace().map(str::to_string));
        }
        if header[0] != "P6" || header[3] != "255" {
            return Err(bad("expected binary 8-bit PPM (P6, maxval 255)"));
        }
        let width: usize = header[1].parse().map_err(|_| bad("bad width"))?;
        let height: usize = header[2].parse().map_err(|_| bad("bad height"))?;
        let mut bytes = vec![0u8; width * height * 3];
        reader.read_exact(&mut bytes).map_err(|_| bad("truncated pixel data"))?;
        Ok(Self {
            width,
            height,
            data: bytes.into_iter().map(|b| b as f32 / 255.0).collect(),
        })
    }
}
