//! 8-bit RGB images and binary PPM (P6) I/O.

use std::io::{BufRead, Write};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize * 3],
        }
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != width as usize * height as usize * 3 {
            return Err(CoreError::Format(format!(
                "{width}x{height} rgb image needs {} bytes, got {}",
                width as usize * height as usize * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Filled disc centered on pixel `(cx, cy)`; pixels outside are clipped.
    pub fn fill_disc(&mut self, cx: i64, cy: i64, radius: i64, rgb: [u8; 3]) {
        for y in cy - radius..=cy + radius {
            for x in cx - radius..=cx + radius {
                let inside = (x - cx).pow(2) + (y - cy).pow(2) <= radius * radius;
                if inside && x >= 0 && y >= 0 && x < self.width as i64 && y < self.height as i64 {
                    self.put(x as u32, y as u32, rgb);
                }
            }
        }
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_ppm<R: BufRead>(mut r: R) -> Result<Self> {
        let mut fields = Vec::new();
        let mut line = String::new();
        while fields.len() < 4 {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(CoreError::Format("truncated PPM header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            fields.extend(content.split_whitespace().map(str::to_owned));
        }
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(CoreError::Format(format!("unsupported PPM header {fields:?}")));
        }
        let parse = |s: &str| {
            s.parse::<u32>()
                .map_err(|e| CoreError::Format(format!("PPM size {s:?}: {e}")))
        };
        let (width, height) = (parse(&fields[1])?, parse(&fields[2])?);
        let mut data = vec![0u8; width as usize * height as usize * 3];
        r.read_exact(&mut data)?;
        Self::from_raw(width, height, data)
    }
}
