//! In-memory video container and its on-disk forms.
//!
//! Videos are `[frames, channels, height, width]` f32 buffers with nominal
//! range `[0, 1]`. Values are stored unclamped (model samples can overshoot)
//! and are clipped only when exporting to 8-bit formats. Three file forms:
//!
//! * a raw little-endian binary (`.pvid`) that round-trips exactly,
//! * a PNG strip laying frames left-to-right for quick inspection,
//! * an animated GIF.

use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PVID";
const RAW_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl VideoTensor {
    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        if frames == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(Error::Dimension {
                op: "video",
                msg: format!("degenerate video shape {frames}x{channels}x{height}x{width}"),
            });
        }
        Ok(VideoTensor {
            frames,
            channels,
            height,
            width,
            data: vec![0.0; frames * channels * height * width],
        })
    }

    pub fn from_data(
        frames: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != frames * channels * height * width {
            return Err(Error::Dimension {
                op: "video",
                msg: format!(
                    "buffer of {} floats does not fill {frames}x{channels}x{height}x{width}",
                    data.len()
                ),
            });
        }
        let mut v = Self::zeros(frames, channels, height, width)?;
        v.data = data;
        Ok(v)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, f: usize, c: usize, y: usize, x: usize) -> usize {
        ((f * self.channels + c) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, f: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(f, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, f: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(f, c, y, x);
        self.data[i] = v;
    }

    /// One frame's `[channels, height, width]` slice.
    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.channels * self.height * self.width;
        &self.data[f * n..(f + 1) * n]
    }

    // ---- raw binary ----

    pub fn save_raw(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(MAGIC)?;
        for dim in [
            RAW_VERSION,
            self.frames as u32,
            self.channels as u32,
            self.height as u32,
            self.width as u32,
        ] {
            out.write_all(&dim.to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&bytes)?;
        out.flush()?;
        Ok(())
    }

    pub fn load_raw(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Input(format!(
                "{} is not a raw video file (bad magic)",
                path.display()
            )));
        }
        let mut word = [0u8; 4];
        let mut read_u32 = |file: &mut std::io::BufReader<std::fs::File>| -> Result<u32> {
            file.read_exact(&mut word)?;
            Ok(u32::from_le_bytes(word))
        };
        let version = read_u32(&mut file)?;
        if version != RAW_VERSION {
            return Err(Error::Input(format!(
                "raw video version {version} unsupported (expected {RAW_VERSION})"
            )));
        }
        let frames = read_u32(&mut file)? as usize;
        let channels = read_u32(&mut file)? as usize;
        let height = read_u32(&mut file)? as usize;
        let width = read_u32(&mut file)? as usize;
        let numel = frames * channels * height * width;
        let mut bytes = vec![0u8; numel * 4];
        file.read_exact(&mut bytes)?;
        let mut trailing = Vec::new();
        file.read_to_end(&mut trailing)?;
        if !trailing.is_empty() {
            return Err(Error::Input(format!(
                "raw video has {} trailing bytes",
                trailing.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        VideoTensor::from_data(frames, channels, height, width, data)
    }

    // ---- 8-bit exports (clipped here, and only here) ----

    fn require_rgb(&self) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::Input(format!(
                "8-bit export needs 3 channels, video has {}",
                self.channels
            )));
        }
        Ok(())
    }

    fn frame_rgb8(&self, f: usize) -> Vec<u8> {
        let mut px = Vec::with_capacity(self.height * self.width * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    let v = self.get(f, c, y, x).clamp(0.0, 1.0);
                    px.push((v * 255.0).round() as u8);
                }
            }
        }
        px
    }

    /// One frame encoded as PNG bytes in memory (8-bit RGB, values clipped).
    pub fn frame_png(&self, f: usize) -> Result<Vec<u8>> {
        self.require_rgb()?;
        if f >= self.frames {
            return Err(Error::Input(format!(
                "frame {f} out of range for a {}-frame video",
                self.frames
            )));
        }
        let rgb = self.frame_rgb8(f);
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, rgb)
            .expect("sized buffer");
        let mut bytes = Vec::new();
        img.write_to(
            &mut std::io::Cursor::new(&mut bytes),
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::Input(format!("png encode: {e}")))?;
        Ok(bytes)
    }

    /// All frames side by side in one PNG, earliest on the left.
    pub fn save_png_strip(&self, path: &Path) -> Result<()> {
        self.require_rgb()?;
        let mut img = image::RgbImage::new((self.frames * self.width) as u32, self.height as u32);
        for f in 0..self.frames {
            let rgb = self.frame_rgb8(f);
            for y in 0..self.height {
                for x in 0..self.width {
                    let i = (y * self.width + x) * 3;
                    img.put_pixel(
                        (f * self.width + x) as u32,
                        y as u32,
                        image::Rgb([rgb[i], rgb[i + 1], rgb[i + 2]]),
                    );
                }
            }
        }
        img.save(path).map_err(|e| Error::Input(format!("png encode: {e}")))?;
        Ok(())
    }

    pub fn save_gif(&self, path: &Path, centiseconds_per_frame: u32) -> Result<()> {
        self.require_rgb()?;
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut enc = image::codecs::gif::GifEncoder::new(file);
        enc.set_repeat(image::codecs::gif::Repeat::Infinite)
            .map_err(|e| Error::Input(format!("gif encode: {e}")))?;
        for f in 0..self.frames {
            let rgb = self.frame_rgb8(f);
            let mut rgba = Vec::with_capacity(rgb.len() / 3 * 4);
            for px in rgb.chunks_exact(3) {
                rgba.extend_from_slice(&[px[0], px[1], px[2], 255]);
            }
            let buf = image::RgbaImage::from_raw(self.width as u32, self.height as u32, rgba)
                .expect("sized buffer");
            let frame = image::Frame::from_parts(
                buf,
                0,
                0,
                image::Delay::from_numer_denom_ms(centiseconds_per_frame * 10, 1),
            );
            enc.encode_frame(frame)
                .map_err(|e| Error::Input(format!("gif encode: {e}")))?;
        }
        Ok(())
    }
}
