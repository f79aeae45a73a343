//! 8-bit video buffers and their raw on-disk form.
//!
//! File layout: one text line `tubelet-video <frames> <height> <width> <channels> u8`
//! followed by `frames·height·width·channels` bytes in `[T, H, W, C]` order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Tensor;

const MAGIC: &str = "tubelet-video";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Video {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Video {
    pub fn filled(frames: usize, height: usize, width: usize, channels: usize, value: u8) -> Self {
        Self {
            frames,
            height,
            width,
            channels,
            data: vec![value; frames * height * width * channels],
        }
    }

    pub fn offset(&self, t: usize, y: usize, x: usize) -> usize {
        ((t * self.height + y) * self.width + x) * self.channels
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize) -> &[u8] {
        let o = self.offset(t, y, x);
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, t: usize, y: usize, x: usize) -> &mut [u8] {
        let o = self.offset(t, y, x);
        &mut self.data[o..o + self.channels]
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Frames `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<Video> {
        if start + len > self.frames {
            return Err(Error::InvalidInput(format!(
                "window [{start}, {}) exceeds {} frames",
                start + len,
                self.frames
            )));
        }
        let fl = self.frame_len();
        Ok(Video {
            frames: len,
            data: self.data[start * fl..(start + len) * fl].to_vec(),
            ..*self
        })
    }

    /// `[T, H, W, C]` tensor with values mapped from `0..=255` to `[-1, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| (v as f64 / 255.0 - 0.5) * 2.0).collect();
        Tensor {
            shape: vec![self.frames, self.height, self.width, self.channels],
            data,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "{MAGIC} {} {} {} {} u8",
            self.frames, self.height, self.width, self.channels
        )?;
        w.write_all(&self.data)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Video> {
        let mut r = BufReader::new(r);
        let mut header = String::new();
        r.read_line(&mut header)?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let [magic, t, h, w, c, dtype] = parts[..] else {
            return Err(Error::Format(format!("bad video header {:?}", header.trim_end())));
        };
        if magic != MAGIC || dtype != "u8" {
            return Err(Error::Format(format!("unsupported video header {:?}", header.trim_end())));
        }
        let dim = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::Format(format!("bad video dimension {s:?}: {e}")))
        };
        let (frames, height, width, channels) = (dim(t)?, dim(h)?, dim(w)?, dim(c)?);
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        if data.len() != frames * height * width * channels {
            return Err(Error::Format(format!(
                "video payload has {} bytes, header implies {}",
                data.len(),
                frames * height * width * channels
            )));
        }
        Ok(Video {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Video> {
        Self::read_from(std::fs::File::open(path)?)
    }
}
