//! Test-time image corruptions: three blurs, two noises, gamma and occlusion.
//!
//! All operators take and return `[0, 1]`-valued planar images. Convolutions
//! clamp to the edge. Stochastic operators are pure functions of
//! `(image, parameters, seed)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

/// Planar row-major image, `channels x height x width`, pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if !(channels == 1 || channels == 3) {
            return Err(Error::InvalidParameter(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidParameter(
                "image dimensions must be positive".into(),
            ));
        }
        if pixels.len() != channels * height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{channels}x{height}x{width} pixels"),
                got: format!("{} pixels", pixels.len()),
            });
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidParameter("pixels must lie in [0, 1]".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            vec![value; channels * height * width],
        )
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

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    fn with_pixels(&self, pixels: Vec<f32>) -> Self {
        Self { pixels, ..*self }
    }

    fn plane_len(&self) -> usize {
        self.height * self.width
    }
}

// Clamp to [0,1] after float arithmetic (rounding can overshoot by an ulp).
#[inline]
fn unit(v: f64) -> f32 {
    (v as f32).clamp(0.0, 1.0)
}

#[inline]
fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// Convolution with a normalized one-pixel-wide line of `length` taps at
/// `angle_degrees` (0 is horizontal).
pub fn motion_blur(img: &Image, length: usize, angle_degrees: f32) -> Result<Image> {
    if length == 0 || length.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!(
            "motion blur length must be odd, got {length}"
        )));
    }
    if length == 1 {
        return Ok(img.clone());
    }
    let theta = f64::from(angle_degrees).to_radians();
    let half = (length / 2) as isize;
    let weight = 1.0 / length as f64;
    let taps: Vec<(isize, isize)> = (-half..=half)
        .map(|k| {
            let k = k as f64;
            (
                (k * theta.cos()).round() as isize,
                (-k * theta.sin()).round() as isize,
            )
        })
        .collect();
    let (h, w) = (img.height, img.width);
    let mut out = Vec::with_capacity(img.pixels.len());
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                let acc: f64 = taps
                    .iter()
                    .map(|&(dx, dy)| {
                        let sx = clamp_index(x as isize + dx, w);
                        let sy = clamp_index(y as isize + dy, h);
                        f64::from(img.get(c, sy, sx))
                    })
                    .sum();
                out.push(unit(acc * weight));
            }
        }
    }
    Ok(img.with_pixels(out))
}

/// Every output pixel copies a uniformly chosen in-bounds input pixel within
/// Chebyshev distance `radius` (same source for all channels).
pub fn frosted_glass(img: &Image, radius: usize, seed: u64) -> Image {
    if radius == 0 {
        return img.clone();
    }
    let mut rng = rng::seeded(seed);
    let (h, w) = (img.height, img.width);
    let mut sources = Vec::with_capacity(img.plane_len());
    for y in 0..h {
        for x in 0..w {
            let sy = rng.random_range(y.saturating_sub(radius)..=(y + radius).min(h - 1));
            let sx = rng.random_range(x.saturating_sub(radius)..=(x + radius).min(w - 1));
            sources.push(sy * w + sx);
        }
    }
    let plane = img.plane_len();
    let out = (0..img.channels)
        .flat_map(|c| sources.iter().map(move |&s| img.pixels[c * plane + s]))
        .collect();
    img.with_pixels(out)
}

/// Normalized Gaussian taps for radius `ceil(3 sigma)`.
pub(crate) fn gaussian_kernel(sigma: f32) -> Vec<f64> {
    let sigma = f64::from(sigma);
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur.
pub fn gaussian_blur(img: &Image, sigma: f32) -> Result<Image> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "blur sigma must be positive, got {sigma}"
        )));
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w) = (img.height, img.width);
    let mut out = Vec::with_capacity(img.pixels.len());
    let mut tmp = vec![0.0f64; img.plane_len()];
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kw)| {
                        kw * f64::from(img.get(
                            c,
                            y,
                            clamp_index(x as isize + k as isize - radius, w),
                        ))
                    })
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kw)| {
                        kw * tmp[clamp_index(y as isize + k as isize - radius, h) * w + x]
                    })
                    .sum();
                out.push(unit(v));
            }
        }
    }
    Ok(img.with_pixels(out))
}

/// Adds `N(0, sigma^2)` to every pixel and clamps to `[0, 1]`.
pub fn gaussian_noise(img: &Image, sigma: f32, seed: u64) -> Result<Image> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "noise sigma must be >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = rng::seeded(seed);
    let normal = Normal::new(0.0, f64::from(sigma)).expect("valid sigma");
    let out = img
        .pixels
        .iter()
        .map(|&p| unit(f64::from(p) + normal.sample(&mut rng)))
        .collect();
    Ok(img.with_pixels(out))
}

/// Sets each pixel (all channels) with probability `p` to 0 or 1, equal odds.
pub fn salt_pepper(img: &Image, p: f32, seed: u64) -> Result<Image> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!(
            "salt-and-pepper p must be in [0, 1], got {p}"
        )));
    }
    if p == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = rng::seeded(seed);
    let plane = img.plane_len();
    let mut out = img.pixels.clone();
    for i in 0..plane {
        if rng.random_bool(f64::from(p)) {
            let v = if rng.random::<bool>() { 1.0 } else { 0.0 };
            for c in 0..img.channels {
                out[c * plane + i] = v;
            }
        }
    }
    Ok(img.with_pixels(out))
}

/// `out = in^gamma`: `gamma > 1` darkens, `gamma < 1` lightens.
pub fn gamma_correct(img: &Image, gamma: f32) -> Result<Image> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    if gamma == 1.0 {
        return Ok(img.clone());
    }
    let out = img
        .pixels
        .iter()
        .map(|&p| p.powf(gamma).clamp(0.0, 1.0))
        .collect();
    Ok(img.with_pixels(out))
}

/// Blacks out the rectangle `[x, x+w) x [y, y+h)` clipped to the image.
pub fn occlude(img: &Image, x: usize, y: usize, w: usize, h: usize) -> Image {
    let mut out = img.pixels.clone();
    let x_end = x.saturating_add(w).min(img.width);
    let y_end = y.saturating_add(h).min(img.height);
    let plane = img.plane_len();
    for c in 0..img.channels {
        for row in y.min(y_end)..y_end {
            let base = c * plane + row * img.width;
            for v in &mut out[base + x.min(x_end)..base + x_end] {
                *v = 0.0;
            }
        }
    }
    img.with_pixels(out)
}

/// Occlusion placement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OcclusionRect {
    /// Centered patch with the image's aspect ratio covering `area` of it.
    Centered { area: f32 },
    Explicit {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
    },
}

impl OcclusionRect {
    pub fn resolve(&self, height: usize, width: usize) -> (usize, usize, usize, usize) {
        match *self {
            OcclusionRect::Explicit { x, y, w, h } => (x, y, w, h),
            OcclusionRect::Centered { area } => {
                let side = f64::from(area).clamp(0.0, 1.0).sqrt();
                let w = (width as f64 * side).round() as usize;
                let h = (height as f64 * side).round() as usize;
                ((width - w) / 2, (height - h) / 2, w, h)
            }
        }
    }
}

/// One corruption with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distortion {
    MotionBlur { length: usize, angle_degrees: f32 },
    FrostedGlass { radius: usize },
    GaussianBlur { sigma: f32 },
    GaussianNoise { sigma: f32 },
    SaltPepper { p: f32 },
    Gamma { gamma: f32 },
    Occlusion(OcclusionRect),
}

impl Distortion {
    /// Default severities, one per corruption, gamma both ways.
    pub fn default_suite() -> Vec<Distortion> {
        vec![
            Distortion::MotionBlur {
                length: 9,
                angle_degrees: 0.0,
            },
            Distortion::FrostedGlass { radius: 2 },
            Distortion::GaussianBlur { sigma: 1.5 },
            Distortion::GaussianNoise { sigma: 0.05 },
            Distortion::SaltPepper { p: 0.05 },
            Distortion::Gamma { gamma: 2.0 },
            Distortion::Gamma { gamma: 0.5 },
            Distortion::Occlusion(OcclusionRect::Centered { area: 0.25 }),
        ]
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Distortion::MotionBlur { .. } => "motion_blur",
            Distortion::FrostedGlass { .. } => "frosted_glass",
            Distortion::GaussianBlur { .. } => "gaussian_blur",
            Distortion::GaussianNoise { .. } => "gaussian_noise",
            Distortion::SaltPepper { .. } => "salt_pepper",
            Distortion::Gamma { .. } => "gamma",
            Distortion::Occlusion(_) => "occlusion",
        }
    }

    /// Short name used in reports.
    pub fn label(&self) -> String {
        match *self {
            Distortion::Gamma { gamma } if gamma > 1.0 => "gamma_darken".into(),
            Distortion::Gamma { gamma } if gamma < 1.0 => "gamma_lighten".into(),
            _ => self.kind().into(),
        }
    }

    pub fn apply(&self, img: &Image, seed: u64) -> Result<Image> {
        match *self {
            Distortion::MotionBlur {
                length,
                angle_degrees,
            } => motion_blur(img, length, angle_degrees),
            Distortion::FrostedGlass { radius } => Ok(frosted_glass(img, radius, seed)),
            Distortion::GaussianBlur { sigma } => gaussian_blur(img, sigma),
            Distortion::GaussianNoise { sigma } => gaussian_noise(img, sigma, seed),
            Distortion::SaltPepper { p } => salt_pepper(img, p, seed),
            Distortion::Gamma { gamma } => gamma_correct(img, gamma),
            Distortion::Occlusion(rect) => {
                let (x, y, w, h) = rect.resolve(img.height, img.width);
                Ok(occlude(img, x, y, w, h))
            }
        }
    }
}

impl fmt::Display for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "kind={}", self.kind())?;
        match *self {
            Distortion::MotionBlur {
                length,
                angle_degrees,
            } => write!(f, ",length={length},angle={angle_degrees}"),
            Distortion::FrostedGlass { radius } => write!(f, ",radius={radius}"),
            Distortion::GaussianBlur { sigma } | Distortion::GaussianNoise { sigma } => {
                write!(f, ",sigma={sigma}")
            }
            Distortion::SaltPepper { p } => write!(f, ",p={p}"),
            Distortion::Gamma { gamma } => write!(f, ",gamma={gamma}"),
            Distortion::Occlusion(OcclusionRect::Centered { area }) => write!(f, ",area={area}"),
            Distortion::Occlusion(OcclusionRect::Explicit { x, y, w, h }) => {
                write!(f, ",x={x},y={y},w={w},h={h}")
            }
        }
    }
}

/// Parses `kind=<name>[,param=value...]`; omitted parameters take the
/// default severity.
impl FromStr for Distortion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut kind = None;
        let mut params = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| {
                Error::Usage(format!(
                    "expected key=value in distortion spec, got {part:?}"
                ))
            })?;
            if k == "kind" {
                kind = Some(v.to_string());
            } else {
                params.push((k.to_string(), v.to_string()));
            }
        }
        let kind =
            kind.ok_or_else(|| Error::Usage(format!("distortion spec {s:?} lacks kind=")))?;
        let mut get = |name: &str| -> Option<String> {
            let pos = params.iter().position(|(k, _)| k == name)?;
            Some(params.remove(pos).1)
        };
        fn num<T: FromStr>(name: &str, v: Option<String>, default: T) -> Result<T> {
            match v {
                None => Ok(default),
                Some(v) => v.parse().map_err(|_| {
                    Error::Usage(format!("bad value {v:?} for distortion parameter {name}"))
                }),
            }
        }
        let d = match kind.as_str() {
            "motion_blur" => Distortion::MotionBlur {
                length: num("length", get("length"), 9)?,
                angle_degrees: num("angle", get("angle"), 0.0)?,
            },
            "frosted_glass" => Distortion::FrostedGlass {
                radius: num("radius", get("radius"), 2)?,
            },
            "gaussian_blur" => Distortion::GaussianBlur {
                sigma: num("sigma", get("sigma"), 1.5)?,
            },
            "gaussian_noise" => Distortion::GaussianNoise {
                sigma: num("sigma", get("sigma"), 0.05)?,
            },
            "salt_pepper" => Distortion::SaltPepper {
                p: num("p", get("p"), 0.05)?,
            },
            "gamma" => Distortion::Gamma {
                gamma: num("gamma", get("gamma"), 2.0)?,
            },
            "occlusion" => {
                let rect = [get("x"), get("y"), get("w"), get("h")];
                Distortion::Occlusion(if rect.iter().any(Option::is_some) {
                    let [x, y, w, h] = rect;
                    OcclusionRect::Explicit {
                        x: num("x", x, 0)?,
                        y: num("y", y, 0)?,
                        w: num("w", w, 0)?,
                        h: num("h", h, 0)?,
                    }
                } else {
                    OcclusionRect::Centered {
                        area: num("area", get("area"), 0.25)?,
                    }
                })
            }
            other => return Err(Error::Usage(format!("unknown distortion kind {other:?}"))),
        };
        if let Some((k, _)) = params.first() {
            return Err(Error::Usage(format!(
                "unknown parameter {k:?} for distortion {kind}"
            )));
        }
        Ok(d)
    }
}
