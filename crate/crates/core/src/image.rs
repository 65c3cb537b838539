//! 8-bit RGB images and binary PPM (P6) encoding.

use std::io::{self, BufRead, Write};

use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum PpmError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a binary PPM: {0}")]
    Format(String),
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![0; width as usize * height as usize * 3] }
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        assert!(x < self.width && y < self.height, "pixel ({x}, {y}) out of bounds");
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let o = self.offset(x, y);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let o = self.offset(x, y);
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() + 20);
        self.write_ppm(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_ppm<R: BufRead>(mut r: R) -> Result<Self, PpmError> {
        let mut fields = Vec::new();
        while fields.len() < 4 {
            let mut tok = Vec::new();
            loop {
                let mut b = [0u8];
                if r.read(&mut b)? == 0 {
                    return Err(PpmError::Format("truncated header".into()));
                }
                match b[0] {
                    b'#' if tok.is_empty() => {
                        let mut skip = Vec::new();
                        r.read_until(b'\n', &mut skip)?;
                    }
                    c if c.is_ascii_whitespace() => {
                        if !tok.is_empty() {
                            break;
                        }
                    }
                    c => tok.push(c),
                }
            }
            fields.push(String::from_utf8_lossy(&tok).into_owned());
        }
        if fields[0] != "P6" {
            return Err(PpmError::Format(format!("magic {:?}", fields[0])));
        }
        let num = |s: &str| s.parse::<u32>().map_err(|_| PpmError::Format(format!("bad number {s:?}")));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(PpmError::Format(format!("maxval {maxval} unsupported")));
        }
        let mut img = Self::new(width, height);
        r.read_exact(&mut img.data).map_err(|_| PpmError::Format("truncated pixel data".into()))?;
        Ok(img)
    }
}
