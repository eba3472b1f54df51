//! In-memory image representation and binary PPM (P6) ingest/emit.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

/// An RGB image with values in `[0,1]`, row-major, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// `height * width * 3` values, index `(y*width + x)*3 + c`.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "images must be non-empty");
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, p: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = p[0];
        self.data[i + 1] = p[1];
        self.data[i + 2] = p[2];
    }

    /// Bilinear sample with edge clamping; pixel centers at integer coords.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f32; 3] {
        let w = self.width as i64;
        let h = self.height as i64;
        let x0 = x.floor() as i64;
        let y0 = y.floor() as i64;
        let dx = (x - x0 as f64) as f32;
        let dy = (y - y0 as f64) as f32;
        let cx0 = x0.clamp(0, w - 1) as usize;
        let cx1 = (x0 + 1).clamp(0, w - 1) as usize;
        let cy0 = y0.clamp(0, h - 1) as usize;
        let cy1 = (y0 + 1).clamp(0, h - 1) as usize;
        let p00 = self.pixel(cx0, cy0);
        let p10 = self.pixel(cx1, cy0);
        let p01 = self.pixel(cx0, cy1);
        let p11 = self.pixel(cx1, cy1);
        let mut out = [0.0f32; 3];
        for c in 0..3 {
            let top = p00[c] + dx * (p10[c] - p00[c]);
            let bot = p01[c] + dx * (p11[c] - p01[c]);
            out[c] = top + dy * (bot - top);
        }
        out
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Encode as binary PPM (P6, maxval 255).
    pub fn write_ppm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
            .collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn save_ppm<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_ppm(std::io::BufWriter::new(f))
    }

    pub fn read_ppm<R: Read>(mut r: R, name: &str) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::decode_ppm(&buf, name)
    }

    pub fn load_ppm<P: AsRef<Path>>(path: P) -> Result<Self> {
        let name = path.as_ref().display().to_string();
        let buf = std::fs::read(path)?;
        Self::decode_ppm(&buf, &name)
    }

    fn decode_ppm(buf: &[u8], name: &str) -> Result<Self> {
        let err = |msg: &str| Error::Parse {
            file: name.to_string(),
            msg: msg.to_string(),
        };
        let mut pos = 0usize;
        let token = |pos: &mut usize| -> Result<Vec<u8>> {
            // skip whitespace and '#' comments
            loop {
                while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
                    *pos += 1;
                }
                if *pos < buf.len() && buf[*pos] == b'#' {
                    while *pos < buf.len() && buf[*pos] != b'\n' {
                        *pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = *pos;
            while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if start == *pos {
                return Err(err("truncated header"));
            }
            Ok(buf[start..*pos].to_vec())
        };
        let magic = token(&mut pos)?;
        if magic != b"P6" {
            return Err(err("not a P6 ppm"));
        }
        let parse_num = |t: Vec<u8>| -> Result<usize> {
            std::str::from_utf8(&t)
                .ok()
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| err("bad header number"))
        };
        let width = parse_num(token(&mut pos)?)?;
        let height = parse_num(token(&mut pos)?)?;
        let maxval = parse_num(token(&mut pos)?)?;
        if maxval != 255 {
            return Err(err("only maxval 255 supported"));
        }
        if width < 8 || height < 8 {
            return Err(err("image smaller than 8x8"));
        }
        pos += 1; // single whitespace after maxval
        let need = width * height * 3;
        if buf.len() < pos + need {
            return Err(err("truncated pixel data"));
        }
        let data = buf[pos..pos + need]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        Ok(Image {
            height,
            width,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_exact_at_8bit() {
        let mut img = Image::new(8, 9);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f32 / 255.0;
        }
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        let back = Image::read_ppm(&buf[..], "mem").unwrap();
        assert_eq!(back.width, 9);
        assert_eq!(back.height, 8);
        assert_eq!(back.data, img.data);
    }

    #[test]
    fn truncated_ppm_rejected() {
        let img = Image::new(8, 8);
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        buf.truncate(buf.len() - 5);
        let e = Image::read_ppm(&buf[..], "mem").unwrap_err();
        assert!(e.to_string().contains("truncated"));
    }

    #[test]
    fn bilinear_at_integer_is_exact() {
        let mut img = Image::new(8, 8);
        img.set_pixel(3, 4, [0.25, 0.5, 0.75]);
        assert_eq!(img.sample_bilinear(3.0, 4.0), [0.25, 0.5, 0.75]);
    }
}
