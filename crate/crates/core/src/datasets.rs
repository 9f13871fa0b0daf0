//! Desk-scale data: synthetic Gaussian blobs rendered as images, the CIFAR-10
//! binary reader, class-exclusion splits and the float image container.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::distort::Image;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: u16,
}

/// A collection of same-shaped labeled images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    items: Vec<LabeledImage>,
    num_classes: usize,
    shape: (usize, usize, usize),
}

impl Dataset {
    pub fn new(
        items: Vec<LabeledImage>,
        num_classes: usize,
        shape: (usize, usize, usize),
    ) -> Result<Self> {
        for item in &items {
            let s = (
                item.image.channels(),
                item.image.height(),
                item.image.width(),
            );
            if s != shape {
                return Err(Error::ShapeMismatch {
                    expected: format!("{shape:?}"),
                    got: format!("{s:?}"),
                });
            }
            if usize::from(item.label) >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: usize::from(item.label),
                    classes: num_classes,
                });
            }
        }
        Ok(Self {
            items,
            num_classes,
            shape,
        })
    }

    pub fn items(&self) -> &[LabeledImage] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn feature_len(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for item in &self.items {
            counts[usize::from(item.label)] += 1;
        }
        counts
    }
}

/// How the simplex directions are laid out in pixel space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlobLayout {
    /// One smooth bump per class in its own cell of a grid over the image.
    #[default]
    Spatial,
    /// Random orthonormal directions (Gram-Schmidt on Gaussian vectors).
    Random,
}

impl std::str::FromStr for BlobLayout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Self::Spatial),
            "random" => Ok(Self::Random),
            _ => Err(Error::Usage(format!(
                "unknown blob layout {s:?} (spatial | random)"
            ))),
        }
    }
}

impl std::fmt::Display for BlobLayout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Spatial => "spatial",
            Self::Random => "random",
        })
    }
}

/// Parameters of the synthetic blob generator.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub layout: BlobLayout,
    /// Pixel value the simplex is centered on.
    pub background: f64,
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub samples_per_class: usize,
    /// Distance of each class center from the common centroid.
    pub separation: f64,
    /// Per-pixel standard deviation around the center.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            layout: BlobLayout::default(),
            background: 0.5,
            num_classes: 4,
            channels: 1,
            height: 8,
            width: 8,
            samples_per_class: 500,
            separation: 1.0,
            noise_sigma: 0.15,
            seed: 0,
        }
    }
}

impl BlobSpec {
    pub fn dims(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Class centers in pixel space: a regular simplex of radius
    /// `separation` around mid-gray, embedded along `k` orthonormal
    /// directions chosen by `layout`.
    pub fn centers(&self) -> Result<Vec<Vec<f64>>> {
        let (k, d) = (self.num_classes, self.dims());
        if k < 2 || d < k {
            return Err(Error::InvalidParameter(format!(
                "need 2 <= classes <= dims, got {k} classes in {d} dims"
            )));
        }
        let basis = match self.layout {
            BlobLayout::Spatial => self.spatial_basis()?,
            BlobLayout::Random => self.random_basis(),
        };
        // Simplex vertex j: sqrt(k/(k-1)) * (e_j - 1/k), unit norm.
        let scale = (k as f64 / (k as f64 - 1.0)).sqrt() * self.separation;
        Ok((0..k)
            .map(|j| {
                let mut c = vec![self.background; d];
                for (i, b) in basis.iter().enumerate() {
                    let coef = scale * (if i == j { 1.0 } else { 0.0 } - 1.0 / k as f64);
                    for (x, y) in c.iter_mut().zip(b) {
                        *x += coef * y;
                    }
                }
                c
            })
            .collect())
    }

    /// Grid of `g x g` cells (`g = ceil(sqrt(k))`); class `j` owns cell `j`
    /// and its direction is a Gaussian bump centered there, identical across
    /// channels. Cells are disjoint, so the directions are orthogonal.
    fn spatial_basis(&self) -> Result<Vec<Vec<f64>>> {
        let k = self.num_classes;
        let g = (1..=k).find(|g| g * g >= k).unwrap_or(k);
        if g > self.height || g > self.width {
            return Err(Error::InvalidParameter(format!(
                "{k} classes need at least a {g}x{g} image for the spatial layout"
            )));
        }
        let (h, w) = (self.height, self.width);
        Ok((0..k)
            .map(|j| {
                let (gy, gx) = (j / g, j % g);
                let (y0, y1) = (gy * h / g, (gy + 1) * h / g);
                let (x0, x1) = (gx * w / g, (gx + 1) * w / g);
                let (cy, cx) = ((y0 + y1) as f64 / 2.0 - 0.5, (x0 + x1) as f64 / 2.0 - 0.5);
                let sigma = ((y1 - y0).min(x1 - x0) as f64 / 3.0).max(0.5);
                let mut v = vec![0.0; self.dims()];
                for c in 0..self.channels {
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            v[(c * h + y) * w + x] = (-r2 / (2.0 * sigma * sigma)).exp();
                        }
                    }
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect())
    }

    fn random_basis(&self) -> Vec<Vec<f64>> {
        let (k, d) = (self.num_classes, self.dims());
        let mut rng = rng::seeded(rng::derive(self.seed, "blob-basis"));
        // Gram-Schmidt on k Gaussian vectors.
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
        while basis.len() < k {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        basis
    }
}

/// Gaussian blobs around [`BlobSpec::centers`], clamped to `[0, 1]`.
/// Samples are ordered by class.
pub fn gen_blobs(spec: &BlobSpec) -> Result<Dataset> {
    if !(spec.noise_sigma >= 0.0 && spec.separation >= 0.0) {
        return Err(Error::InvalidParameter(
            "separation and noise_sigma must be >= 0".into(),
        ));
    }
    if spec.num_classes > usize::from(u16::MAX) {
        return Err(Error::InvalidParameter("too many classes".into()));
    }
    let centers = spec.centers()?;
    let noise = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
    let mut rng = rng::seeded(rng::derive(spec.seed, "blob-samples"));
    let mut items = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let px = center
                .iter()
                .map(|&c| (c + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32)
                .collect();
            items.push(LabeledImage {
                image: Image::new(spec.channels, spec.height, spec.width, px)?,
                label: label as u16,
            });
        }
    }
    Dataset::new(
        items,
        spec.num_classes,
        (spec.channels, spec.height, spec.width),
    )
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses CIFAR-10 binary records (1 label byte, then 3072 planar RGB bytes).
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "CIFAR-10 file size {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let items = bytes
        .chunks_exact(CIFAR_RECORD)
        .map(|rec| {
            if rec[0] > 9 {
                return Err(Error::Format(format!("CIFAR-10 label byte {} > 9", rec[0])));
            }
            let px = rec[1..].iter().map(|&b| f32::from(b) / 255.0).collect();
            Ok(LabeledImage {
                image: Image::new(3, 32, 32, px)?,
                label: u16::from(rec[0]),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(items, 10, (3, 32, 32))
}

pub fn read_cifar10(path: &Path) -> Result<Dataset> {
    parse_cifar10(&fs::read(path)?)
}

/// Concatenates several CIFAR-10 batch files.
pub fn read_cifar10_files(paths: &[&Path]) -> Result<Dataset> {
    let mut items = Vec::new();
    for p in paths {
        items.extend(read_cifar10(p)?.items);
    }
    Dataset::new(items, 10, (3, 32, 32))
}

pub const DATASET_MAGIC: &[u8; 7] = b"ZSELDS1";

/// Container layout: magic, u32 count, u32 C, H, W, then per record a u16
/// label and `C*H*W` f32 pixels. Little-endian throughout.
pub fn container_bytes(data: &Dataset) -> Vec<u8> {
    let (c, h, w) = data.shape;
    let mut out = Vec::with_capacity(23 + data.len() * (2 + 4 * c * h * w));
    out.extend_from_slice(DATASET_MAGIC);
    for v in [data.len(), c, h, w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for item in &data.items {
        out.extend_from_slice(&item.label.to_le_bytes());
        for p in item.image.pixels() {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    out
}

/// Parses a container. The class count is `max label + 1` unless
/// `num_classes` is given.
pub fn parse_container(bytes: &[u8], num_classes: Option<usize>) -> Result<Dataset> {
    let header = 7 + 16;
    if bytes.len() < header || &bytes[..7] != DATASET_MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let word = |i: usize| {
        u32::from_le_bytes(bytes[7 + 4 * i..11 + 4 * i].try_into().expect("4 bytes")) as usize
    };
    let (count, c, h, w) = (word(0), word(1), word(2), word(3));
    let record = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(2))
        .ok_or_else(|| Error::Format("record size overflow".into()))?;
    if count
        .checked_mul(record)
        .and_then(|v| v.checked_add(header))
        != Some(bytes.len())
    {
        return Err(Error::Format(format!(
            "dataset body does not hold {count} records"
        )));
    }
    let items = bytes[header..]
        .chunks_exact(record)
        .map(|rec| {
            let label = u16::from_le_bytes([rec[0], rec[1]]);
            let px = rec[2..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            Ok(LabeledImage {
                image: Image::new(c, h, w, px).map_err(|e| Error::Format(e.to_string()))?,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let classes = num_classes.unwrap_or_else(|| {
        items
            .iter()
            .map(|i| usize::from(i.label) + 1)
            .max()
            .unwrap_or(0)
    });
    Dataset::new(items, classes, (c, h, w))
}

pub fn write_container(data: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, container_bytes(data))?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Dataset> {
    parse_container(&fs::read(path)?, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub excluded_classes: BTreeSet<u16>,
    /// Fraction of kept-class samples used for training.
    pub train_fraction: f64,
    pub seed: u64,
}

/// Result of [`split`].
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// Kept classes, labels re-indexed densely.
    pub train: Dataset,
    /// Held-out kept-class samples, labels re-indexed like `train`.
    pub test_in: Dataset,
    /// Every excluded-class sample, original labels.
    pub test_out: Dataset,
    /// `kept[new_label] = original_label`.
    pub kept: Vec<u16>,
}

/// Partitions `data` into training, in-distribution test and
/// out-of-distribution test sets.
pub fn split(data: &Dataset, spec: &SplitSpec) -> Result<Split> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "train_fraction must be in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    if let Some(&bad) = spec
        .excluded_classes
        .iter()
        .find(|&&c| usize::from(c) >= data.num_classes)
    {
        return Err(Error::LabelOutOfRange {
            label: usize::from(bad),
            classes: data.num_classes,
        });
    }
    let kept: Vec<u16> = (0..data.num_classes as u16)
        .filter(|c| !spec.excluded_classes.contains(c))
        .collect();
    if kept.is_empty() {
        return Err(Error::InvalidParameter("cannot exclude every class".into()));
    }
    let mut remap = vec![None; data.num_classes];
    for (new, &old) in kept.iter().enumerate() {
        remap[usize::from(old)] = Some(new as u16);
    }

    let mut inside = Vec::new();
    let mut outside = Vec::new();
    for item in &data.items {
        match remap[usize::from(item.label)] {
            Some(new) => inside.push(LabeledImage {
                image: item.image.clone(),
                label: new,
            }),
            None => outside.push(item.clone()),
        }
    }
    let mut rng = rng::seeded(spec.seed);
    inside.shuffle(&mut rng);
    outside.shuffle(&mut rng);
    let n_train = (inside.len() as f64 * spec.train_fraction).round() as usize;
    let test_in = inside.split_off(n_train);
    Ok(Split {
        train: Dataset::new(inside, kept.len(), data.shape)?,
        test_in: Dataset::new(test_in, kept.len(), data.shape)?,
        test_out: Dataset::new(outside, data.num_classes, data.shape)?,
        kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64) -> BlobSpec {
        BlobSpec {
            num_classes: 3,
            channels: 1,
            height: 4,
            width: 4,
            samples_per_class: 50,
            separation: 0.3,
            noise_sigma: noise,
            seed: 5,
            ..BlobSpec::default()
        }
    }

    #[test]
    fn zero_noise_blobs_sit_on_centers() {
        let s = spec(0.0);
        let d = gen_blobs(&s).unwrap();
        let centers = s.centers().unwrap();
        for item in d.items() {
            let c = &centers[usize::from(item.label)];
            for (p, q) in item.image.pixels().iter().zip(c) {
                assert!((f64::from(*p) - q.clamp(0.0, 1.0)).abs() < 1e-6);
            }
        }
        assert_eq!(d.class_counts(), vec![50, 50, 50]);
    }

    #[test]
    fn centers_form_regular_simplex() {
        let s = spec(0.1);
        let c = s.centers().unwrap();
        let dist = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let expected = 0.3 * (2.0 * 3.0 / 2.0f64).sqrt();
        for i in 0..3 {
            for j in i + 1..3 {
                assert!((dist(&c[i], &c[j]) - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn nearest_center_accuracy_at_ratio_six() {
        let s = BlobSpec {
            num_classes: 4,
            channels: 1,
            height: 8,
            width: 8,
            samples_per_class: 250,
            separation: 0.6,
            noise_sigma: 0.1,
            seed: 17,
            ..BlobSpec::default()
        };
        let d = gen_blobs(&s).unwrap();
        let centers = s.centers().unwrap();
        let correct = d
            .items()
            .iter()
            .filter(|item| {
                let best = (0..centers.len())
                    .min_by(|&a, &b| {
                        let da: f64 = item
                            .image
                            .pixels()
                            .iter()
                            .zip(&centers[a])
                            .map(|(p, c)| (f64::from(*p) - c).powi(2))
                            .sum();
                        let db: f64 = item
                            .image
                            .pixels()
                            .iter()
                            .zip(&centers[b])
                            .map(|(p, c)| (f64::from(*p) - c).powi(2))
                            .sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == usize::from(item.label)
            })
            .count();
        assert!(correct as f64 / d.len() as f64 >= 0.99);
    }

    #[test]
    fn cifar_records() {
        assert!(parse_cifar10(&[]).unwrap().is_empty());
        let zeros = parse_cifar10(&vec![0u8; CIFAR_RECORD]).unwrap();
        assert_eq!(zeros.len(), 1);
        assert_eq!(zeros.items()[0].label, 0);
        assert!(zeros.items()[0].image.pixels().iter().all(|&p| p == 0.0));

        let mut rec = vec![7u8];
        rec.extend((0..3072).map(|i| (i % 256) as u8));
        let d = parse_cifar10(&rec).unwrap();
        for (i, &p) in d.items()[0].image.pixels().iter().enumerate() {
            assert_eq!(p, (i % 256) as f32 / 255.0);
        }
        assert!(parse_cifar10(&vec![0u8; CIFAR_RECORD + 1]).is_err());
        let mut bad = vec![0u8; CIFAR_RECORD];
        bad[0] = 10;
        assert!(parse_cifar10(&bad).is_err());
    }

    #[test]
    fn cifar_round_trips_through_container() {
        let mut bytes = Vec::new();
        for r in 0..3u8 {
            bytes.push(r * 3);
            bytes.extend((0..3072).map(|i| ((i * 7 + usize::from(r)) % 256) as u8));
        }
        let d = parse_cifar10(&bytes).unwrap();
        let back = parse_container(&container_bytes(&d), Some(10)).unwrap();
        assert_eq!(back, d);
        let mut rebuilt = Vec::new();
        for item in back.items() {
            rebuilt.push(item.label as u8);
            rebuilt.extend(
                item.image
                    .pixels()
                    .iter()
                    .map(|&p| (p * 255.0).round() as u8),
            );
        }
        assert_eq!(rebuilt, bytes);
    }

    #[test]
    fn container_rejects_corruption() {
        let d = gen_blobs(&spec(0.1)).unwrap();
        let bytes = container_bytes(&d);
        assert_eq!(&bytes[..7], b"ZSELDS1");
        assert!(parse_container(&bytes[..bytes.len() - 1], None).is_err());
        let mut bad = bytes.clone();
        bad[1] = b'?';
        assert!(parse_container(&bad, None).is_err());
    }

    #[test]
    fn split_partitions_and_remaps() {
        let d = gen_blobs(&spec(0.1)).unwrap();
        let s = split(
            &d,
            &SplitSpec {
                excluded_classes: [1].into(),
                train_fraction: 0.6,
                seed: 2,
            },
        )
        .unwrap();
        assert_eq!(s.train.len() + s.test_in.len() + s.test_out.len(), d.len());
        assert_eq!(s.train.len(), 60);
        assert_eq!(s.kept, vec![0, 2]);
        assert!(s.test_out.items().iter().all(|i| i.label == 1));
        assert_eq!(s.train.num_classes(), 2);
        assert!(s
            .train
            .items()
            .iter()
            .chain(s.test_in.items())
            .all(|i| i.label < 2));

        let none = split(
            &d,
            &SplitSpec {
                excluded_classes: BTreeSet::new(),
                train_fraction: 0.5,
                seed: 2,
            },
        )
        .unwrap();
        assert!(none.test_out.is_empty());

        let all = SplitSpec {
            excluded_classes: [0, 1, 2].into(),
            train_fraction: 0.5,
            seed: 2,
        };
        assert!(split(&d, &all).is_err());
    }

    #[test]
    fn split_is_deterministic_and_lossless() {
        let d = gen_blobs(&spec(0.1)).unwrap();
        let sp = SplitSpec {
            excluded_classes: [2].into(),
            train_fraction: 0.5,
            seed: 9,
        };
        let a = split(&d, &sp).unwrap();
        assert_eq!(a, split(&d, &sp).unwrap());
        // Every original image appears exactly once across the three parts.
        let mut seen: Vec<Vec<u32>> = a
            .train
            .items()
            .iter()
            .chain(a.test_in.items())
            .chain(a.test_out.items())
            .map(|i| i.image.pixels().iter().map(|p| p.to_bits()).collect())
            .collect();
        let mut orig: Vec<Vec<u32>> = d
            .items()
            .iter()
            .map(|i| i.image.pixels().iter().map(|p| p.to_bits()).collect())
            .collect();
        seen.sort();
        orig.sort();
        assert_eq!(seen, orig);
    }

    #[test]
    fn cifar_style_exclusion_keeps_eight_classes() {
        let mut bytes = Vec::new();
        for label in 0..10u8 {
            for _ in 0..10 {
                bytes.push(label);
                bytes.extend(std::iter::repeat_n(label * 20, 3072));
            }
        }
        let d = parse_cifar10(&bytes).unwrap();
        let s = split(
            &d,
            &SplitSpec {
                excluded_classes: [1, 9].into(),
                train_fraction: 0.67,
                seed: 1,
            },
        )
        .unwrap();
        let train_labels: BTreeSet<u16> = s.train.items().iter().map(|i| i.label).collect();
        assert_eq!(train_labels.len(), 8);
        assert_eq!(s.test_out.len(), 20);
        assert_eq!(s.kept, vec![0, 2, 3, 4, 5, 6, 7, 8]);
    }
}
