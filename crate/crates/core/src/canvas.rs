//! Image geometry: strip masks, step windows, compositing and canvas arithmetic.
//!
//! Pixel data is stored row-major as interleaved RGB `f64` in `[0, 1]`.
//! Conversion to 8-bit happens only at the PNG boundary.

use std::fmt;
use std::io::Cursor;
use std::path::Path;
use std::str::FromStr;

use image::imageops::FilterType;
use image::{ImageBuffer, ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Intensity written into masked pixels.
pub const MASK_FILL: f64 = 0.5;

#[derive(Clone, PartialEq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RasterImage")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish_non_exhaustive()
    }
}

impl RasterImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Geometry(format!(
                "image must be at least 1x1, got {height}x{width}"
            )));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::Geometry(format!(
                "expected {} samples for {height}x{width} RGB, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!(
                "pixel intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * CHANNELS])
    }

    /// Builds an image from a per-pixel function returning RGB.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    pub fn crop(&self, rect: Rect) -> Result<RasterImage> {
        if rect.height == 0
            || rect.width == 0
            || rect.top + rect.height > self.height
            || rect.left + rect.width > self.width
        {
            return Err(Error::Geometry(format!(
                "crop {rect:?} outside {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(rect.height * rect.width * CHANNELS);
        for y in rect.top..rect.top + rect.height {
            let start = (y * self.width + rect.left) * CHANNELS;
            data.extend_from_slice(&self.data[start..start + rect.width * CHANNELS]);
        }
        Ok(RasterImage {
            height: rect.height,
            width: rect.width,
            data,
        })
    }

    /// Copies `src` with its top-left corner at `(top, left)`; out-of-range pixels are clipped.
    fn paste(&mut self, src: &RasterImage, top: usize, left: usize) {
        for y in 0..src.height {
            let ty = top + y;
            if ty >= self.height {
                break;
            }
            let n = src.width.min(self.width.saturating_sub(left));
            let s = y * src.width * CHANNELS;
            let d = (ty * self.width + left) * CHANNELS;
            self.data[d..d + n * CHANNELS].copy_from_slice(&src.data[s..s + n * CHANNELS]);
        }
    }

    /// Rounds every sample to the nearest 8-bit level.
    pub fn quantized(&self) -> RasterImage {
        RasterImage {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| f64::from(to_u8(v)) / 255.0)
                .collect(),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self.data.iter().map(|&v| to_u8(v)).collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let data = img.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::new(img.height() as usize, img.width() as usize, data)
    }

    /// Decodes PNG bytes; alpha and grayscale inputs are converted to RGB.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        Self::from_rgb8(&img.to_rgb8())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png_bytes(&bytes)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 over the dimensions and the 8-bit pixel values.
    pub fn content_sha256(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.width as u32).to_le_bytes());
        h.update((self.height as u32).to_le_bytes());
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        h.update(&bytes);
        hex::encode(h.finalize())
    }

    /// Resamples to `height`x`width` with a triangle filter.
    pub fn resize(&self, height: usize, width: usize) -> Result<RasterImage> {
        if height == 0 || width == 0 {
            return Err(Error::Geometry("resize target must be non-empty".into()));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("buffer length matches dimensions");
        let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        let data = out
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v).clamp(0.0, 1.0))
            .collect();
        RasterImage::new(height, width, data)
    }

    /// Mean RGB over a rectangle.
    pub fn region_mean(&self, rect: Rect) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for y in rect.top..rect.top + rect.height {
            for x in rect.left..rect.left + rect.width {
                let p = self.pixel(y, x);
                for c in 0..3 {
                    acc[c] += p[c];
                }
            }
        }
        let n = (rect.height * rect.width) as f64;
        acc.map(|v| v / n)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            top,
            left,
            height,
            width,
        }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Top,
    Bottom,
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Horizontal,
    Vertical,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Top,
        Direction::Bottom,
        Direction::Left,
        Direction::Right,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Top => "top",
            Direction::Bottom => "bottom",
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }

    pub fn axis(self) -> Axis {
        match self {
            Direction::Left | Direction::Right => Axis::Horizontal,
            Direction::Top | Direction::Bottom => Axis::Vertical,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(Direction::Top),
            "bottom" => Ok(Direction::Bottom),
            "left" => Ok(Direction::Left),
            "right" => Ok(Direction::Right),
            other => Err(Error::Validation(format!(
                "unknown direction {other:?} (expected top, bottom, left or right)"
            ))),
        }
    }
}

/// Kept-to-masked proportion along the masking axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "(u32, u32)", into = "(u32, u32)")]
pub struct MaskRatio {
    kept: u32,
    masked: u32,
}

impl MaskRatio {
    pub const HALF: MaskRatio = MaskRatio { kept: 1, masked: 1 };

    pub fn new(kept: u32, masked: u32) -> Result<Self> {
        if kept == 0 || masked == 0 {
            return Err(Error::Validation(format!(
                "mask ratio components must be positive, got ({kept}, {masked})"
            )));
        }
        Ok(Self { kept, masked })
    }

    pub fn kept(&self) -> u32 {
        self.kept
    }

    pub fn masked(&self) -> u32 {
        self.masked
    }

    /// `round(extent * masked / (kept + masked))`, halves rounded up.
    pub fn strip_width(&self, extent: usize) -> usize {
        let total = u64::from(self.kept) + u64::from(self.masked);
        let num = extent as u64 * u64::from(self.masked);
        ((2 * num + total) / (2 * total)) as usize
    }
}

impl Default for MaskRatio {
    fn default() -> Self {
        Self::HALF
    }
}

impl TryFrom<(u32, u32)> for MaskRatio {
    type Error = Error;

    fn try_from((kept, masked): (u32, u32)) -> Result<Self> {
        MaskRatio::new(kept, masked)
    }
}

impl From<MaskRatio> for (u32, u32) {
    fn from(r: MaskRatio) -> Self {
        (r.kept, r.masked)
    }
}

/// An image with one edge strip marked for generation.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedImage {
    image: RasterImage,
    /// 1 = generate, 0 = keep; one entry per pixel.
    mask: Vec<u8>,
    direction: Direction,
    strip: usize,
}

impl MaskedImage {
    /// Masks a `strip`-wide band flush against the `direction` edge and fills it with [`MASK_FILL`].
    pub fn with_strip(source: &RasterImage, direction: Direction, strip: usize) -> Result<Self> {
        let extent = axis_extent(source.height, source.width, direction);
        if strip > extent {
            return Err(Error::Geometry(format!(
                "strip of {strip} exceeds extent {extent}"
            )));
        }
        let (h, w) = (source.height, source.width);
        let rect = strip_rect(h, w, direction, strip);
        let mut image = source.clone();
        let mut mask = vec![0u8; h * w];
        for y in rect.top..rect.top + rect.height {
            for x in rect.left..rect.left + rect.width {
                mask[y * w + x] = 1;
                image.set_pixel(y, x, [MASK_FILL; 3]);
            }
        }
        Ok(Self {
            image,
            mask,
            direction,
            strip,
        })
    }

    pub fn image(&self) -> &RasterImage {
        &self.image
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// Width of the masked strip along the direction's axis.
    pub fn strip(&self) -> usize {
        self.strip
    }

    /// Kept and masked extents reduced by their gcd.
    pub fn ratio(&self) -> (usize, usize) {
        let extent = axis_extent(self.image.height, self.image.width, self.direction);
        let kept = extent - self.strip;
        let g = gcd(kept, self.strip).max(1);
        (kept / g, self.strip / g)
    }

    pub fn masked_rect(&self) -> Rect {
        strip_rect(self.image.height, self.image.width, self.direction, self.strip)
    }

    pub fn kept_rect(&self) -> Rect {
        let (h, w) = (self.image.height, self.image.width);
        let s = self.strip;
        match self.direction {
            Direction::Left => Rect::new(0, s, h, w - s),
            Direction::Right => Rect::new(0, 0, h, w - s),
            Direction::Top => Rect::new(s, 0, h - s, w),
            Direction::Bottom => Rect::new(0, 0, h - s, w),
        }
    }

    /// Replaces every kept pixel of `generated` with the original kept pixel.
    pub fn restore_kept(&self, generated: &RasterImage) -> Result<RasterImage> {
        if generated.height != self.image.height || generated.width != self.image.width {
            return Err(Error::Geometry(format!(
                "generated {}x{} does not match masked input {}x{}",
                generated.height, generated.width, self.image.height, self.image.width
            )));
        }
        let mut out = generated.clone();
        for (i, &m) in self.mask.iter().enumerate() {
            if m == 0 {
                let j = i * CHANNELS;
                out.data[j..j + CHANNELS].copy_from_slice(&self.image.data[j..j + CHANNELS]);
            }
        }
        Ok(out)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn axis_extent(height: usize, width: usize, direction: Direction) -> usize {
    match direction.axis() {
        Axis::Horizontal => width,
        Axis::Vertical => height,
    }
}

fn strip_rect(h: usize, w: usize, direction: Direction, strip: usize) -> Rect {
    match direction {
        Direction::Left => Rect::new(0, 0, h, strip),
        Direction::Right => Rect::new(0, w - strip, h, strip),
        Direction::Top => Rect::new(0, 0, strip, w),
        Direction::Bottom => Rect::new(h - strip, 0, strip, w),
    }
}

/// Masks a square training image once per direction, in `Direction::ALL` order.
pub fn make_training_masks(image: &RasterImage, ratio: MaskRatio) -> Result<Vec<MaskedImage>> {
    if !image.is_square() {
        return Err(Error::Geometry(format!(
            "training masks need a square image, got {}x{}",
            image.height, image.width
        )));
    }
    Direction::ALL
        .iter()
        .map(|&d| mask_for_training(image, d, ratio))
        .collect()
}

/// The single-direction slice of [`make_training_masks`].
pub fn mask_for_training(
    image: &RasterImage,
    direction: Direction,
    ratio: MaskRatio,
) -> Result<MaskedImage> {
    let extent = axis_extent(image.height, image.width, direction);
    let strip = ratio.strip_width(extent);
    if strip == 0 || strip == extent {
        return Err(Error::Geometry(format!(
            "ratio {}:{} on extent {extent} leaves an empty region",
            ratio.kept, ratio.masked
        )));
    }
    MaskedImage::with_strip(image, direction, strip)
}

/// The kept strip of a masked image as a standalone image.
pub fn extract_unmasked(masked: &MaskedImage) -> Result<RasterImage> {
    masked.image.crop(masked.kept_rect())
}

/// An image growing one strip at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    image: RasterImage,
    base_window: usize,
    shift: usize,
    plan: Vec<Direction>,
    /// Top-left corner of the most recent base-window square.
    cursor: (usize, usize),
}

impl Canvas {
    pub fn new(image: RasterImage, shift: usize) -> Result<Self> {
        if !image.is_square() {
            return Err(Error::Geometry(format!(
                "initial canvas must be square, got {}x{}",
                image.height, image.width
            )));
        }
        let base_window = image.width;
        if base_window < 2 {
            return Err(Error::Geometry(
                "base window must be at least 2 pixels".into(),
            ));
        }
        if shift >= base_window {
            return Err(Error::Geometry(format!(
                "shift {shift} must be smaller than the base window {base_window}"
            )));
        }
        Ok(Self {
            image,
            base_window,
            shift,
            plan: Vec::new(),
            cursor: (0, 0),
        })
    }

    /// Rebuilds a canvas from its pixels and the directions that produced it.
    pub fn restore(
        image: RasterImage,
        base_window: usize,
        shift: usize,
        plan: &[Direction],
    ) -> Result<Self> {
        let mut canvas = Canvas::new(RasterImage::filled(base_window, base_window, 0.0)?, shift)?;
        let (mut h, mut w) = (base_window, base_window);
        for &d in plan {
            let (cy, cx) = canvas.cursor;
            canvas.cursor = match d {
                Direction::Right => (cy, w + shift - base_window),
                Direction::Left => (cy, 0),
                Direction::Top => (0, cx),
                Direction::Bottom => (h + shift - base_window, cx),
            };
            match d.axis() {
                Axis::Horizontal => w += shift,
                Axis::Vertical => h += shift,
            }
        }
        if (image.height, image.width) != (h, w) {
            return Err(Error::Geometry(format!(
                "canvas is {}x{}, but the plan implies {h}x{w}",
                image.height, image.width
            )));
        }
        canvas.image = image;
        canvas.plan = plan.to_vec();
        Ok(canvas)
    }

    pub fn image(&self) -> &RasterImage {
        &self.image
    }

    pub fn into_image(self) -> RasterImage {
        self.image
    }

    pub fn base_window(&self) -> usize {
        self.base_window
    }

    pub fn shift(&self) -> usize {
        self.shift
    }

    pub fn steps_taken(&self) -> usize {
        self.plan.len()
    }

    pub fn plan(&self) -> &[Direction] {
        &self.plan
    }

    fn window_rows(&self) -> usize {
        self.cursor.0
    }

    fn window_cols(&self) -> usize {
        self.cursor.1
    }

    /// The base-window square at the edge facing `direction`.
    pub fn local_window(&self, direction: Direction) -> Result<RasterImage> {
        let b = self.base_window;
        let (h, w) = (self.image.height, self.image.width);
        let rect = match direction {
            Direction::Right => Rect::new(self.window_rows(), w - b, b, b),
            Direction::Left => Rect::new(self.window_rows(), 0, b, b),
            Direction::Top => Rect::new(0, self.window_cols(), b, b),
            Direction::Bottom => Rect::new(h - b, self.window_cols(), b, b),
        };
        self.image.crop(rect)
    }

    /// The masked window for the next step: the outermost `base_window - shift`
    /// slice of the canvas, with the `shift`-wide strip beyond it masked.
    pub fn build_step_input(&self, direction: Direction) -> Result<MaskedImage> {
        let b = self.base_window;
        let s = self.shift;
        let keep = b - s;
        let (h, w) = (self.image.height, self.image.width);
        if axis_extent(h, w, direction) < keep {
            return Err(Error::Geometry(format!(
                "canvas {h}x{w} too small to expand {direction}"
            )));
        }
        let mut window = RasterImage::filled(b, b, MASK_FILL)?;
        if keep > 0 {
            let (src, top, left) = match direction {
                Direction::Right => (Rect::new(self.window_rows(), w - keep, b, keep), 0, 0),
                Direction::Left => (Rect::new(self.window_rows(), 0, b, keep), 0, s),
                Direction::Top => (Rect::new(0, self.window_cols(), keep, b), s, 0),
                Direction::Bottom => (Rect::new(h - keep, self.window_cols(), keep, b), 0, 0),
            };
            window.paste(&self.image.crop(src)?, top, left);
        }
        MaskedImage::with_strip(&window, direction, s)
    }

    /// Appends the masked strip of `generated` beyond the canvas edge.
    pub fn composite(&self, generated: &RasterImage, direction: Direction) -> Result<Canvas> {
        let b = self.base_window;
        let s = self.shift;
        if generated.height != b || generated.width != b {
            return Err(Error::Geometry(format!(
                "generated window is {}x{}, expected {b}x{b}",
                generated.height, generated.width
            )));
        }
        let (h, w) = (self.image.height, self.image.width);
        let (cy, cx) = self.cursor;
        let (nh, nw) = match direction.axis() {
            Axis::Horizontal => (h, w + s),
            Axis::Vertical => (h + s, w),
        };
        let mut image = RasterImage::filled(nh, nw, MASK_FILL)?;
        let cursor = match direction {
            Direction::Right => {
                image.paste(&self.image, 0, 0);
                if s > 0 {
                    image.paste(&generated.crop(Rect::new(0, b - s, b, s))?, cy, w);
                }
                (cy, nw - b)
            }
            Direction::Left => {
                image.paste(&self.image, 0, s);
                if s > 0 {
                    image.paste(&generated.crop(Rect::new(0, 0, b, s))?, cy, 0);
                }
                (cy, 0)
            }
            Direction::Top => {
                image.paste(&self.image, s, 0);
                if s > 0 {
                    image.paste(&generated.crop(Rect::new(0, 0, s, b))?, 0, cx);
                }
                (0, cx)
            }
            Direction::Bottom => {
                image.paste(&self.image, 0, 0);
                if s > 0 {
                    image.paste(&generated.crop(Rect::new(b - s, 0, s, b))?, h, cx);
                }
                (nh - b, cx)
            }
        };
        let mut plan = self.plan.clone();
        plan.push(direction);
        Ok(Canvas {
            image,
            base_window: b,
            shift: s,
            plan,
            cursor,
        })
    }
}

/// Extent along the expansion axis after `steps` single-axis steps.
pub fn canvas_extent(base: usize, shift: usize, steps: usize) -> usize {
    base + steps * shift
}
