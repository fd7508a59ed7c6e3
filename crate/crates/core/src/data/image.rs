use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Decoder, Encoder, Transformations};

use crate::error::{Error, Result};
use crate::tensor::kernels::resize_bilinear_forward;
use crate::tensor::Tensor;

/// 8-bit RGB pixels, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Normalized `[1, 3, out_h, out_w]` network input, `(v/255 − 0.5)/0.25`,
    /// bilinearly resized when the size differs.
    pub fn to_tensor(&self, out_h: usize, out_w: usize) -> Tensor {
        let (h, w) = (self.height, self.width);
        let t = Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
            (self.pixels[3 * (y * w + x) + c] as f64 / 255.0 - 0.5) / 0.25
        });
        if (h, w) == (out_h, out_w) {
            t
        } else {
            resize_bilinear_forward(&t, out_h, out_w)
        }
    }
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let fail = |reason: String| Error::Parse {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| fail(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| fail("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| fail(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(fail("palette was not expanded".into())),
    };
    let mut pixels = Vec::with_capacity(w * h * 3);
    for row in buf.chunks(info.line_size).take(h) {
        for px in row[..w * channels].chunks(channels) {
            match channels {
                1 | 2 => pixels.extend([px[0]; 3]),
                _ => pixels.extend(&px[..3]),
            }
        }
    }
    Ok(RgbImage {
        width: w,
        height: h,
        pixels,
    })
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(ColorType::Rgb);
    enc.set_depth(BitDepth::Eight);
    let to_err = |e: png::EncodingError| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(to_err)?;
    writer.write_image_data(&img.pixels).map_err(to_err)?;
    writer.finish().map_err(to_err)
}

pub type DecodeFn = fn(&Path) -> Result<RgbImage>;

/// Image decoders keyed by lower-case file extension. The default set only
/// holds PNG; other formats can be registered by the embedding program.
#[derive(Clone, Debug)]
pub struct Decoders {
    by_ext: BTreeMap<String, DecodeFn>,
}

impl Default for Decoders {
    fn default() -> Self {
        let mut d = Self { by_ext: BTreeMap::new() };
        d.register("png", read_png);
        d
    }
}

impl Decoders {
    pub fn register(&mut self, ext: &str, f: DecodeFn) {
        self.by_ext.insert(ext.to_ascii_lowercase(), f);
    }

    pub fn decode(&self, path: &Path) -> Result<RgbImage> {
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        match ext.as_deref().and_then(|e| self.by_ext.get(e)) {
            Some(f) => f(path),
            None => Err(Error::Parse {
                path: path.to_path_buf(),
                reason: format!(
                    "no decoder registered for this extension (have: {})",
                    self.by_ext.keys().cloned().collect::<Vec<_>>().join(", ")
                ),
            }),
        }
    }
}

/// Decodes an image with the default decoders.
pub fn load_image(path: &Path) -> Result<RgbImage> {
    Decoders::default().decode(path)
}
