use std::fs;
use std::path::{Path, PathBuf};

use featlens_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::transform::TransformSpec;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn file_prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

/// Grayscale float image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(h: usize, w: usize) -> Self {
        Image {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    fn at(&self, r: isize, c: isize) -> f32 {
        if r < 0 || c < 0 || r >= self.h as isize || c >= self.w as isize {
            0.0
        } else {
            self.data[r as usize * self.w + c as usize]
        }
    }

    pub fn resize(&self, h: usize, w: usize) -> Result<Image> {
        if (h, w) == (self.h, self.w) {
            return Ok(self.clone());
        }
        let t = Tensor::new(vec![self.h, self.w], self.data.clone())?.resize_bilinear((h, w))?;
        Ok(Image {
            h,
            w,
            data: t.into_data(),
        })
    }

    fn rot90(&self, quarter_turns: usize) -> Result<Image> {
        let t = Tensor::new(vec![self.h, self.w], self.data.clone())?.rot90(quarter_turns)?;
        let (h, w) = (t.shape()[0], t.shape()[1]);
        Ok(Image {
            h,
            w,
            data: t.into_data(),
        })
    }
}

/// How a scaled image is presented to the host.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CanvasPolicy {
    /// Resized content centered in a zero canvas of the original size.
    #[default]
    PadToCanvas,
    /// Resized content alone, at reduced resolution.
    Shrink,
}

/// Side length of the resized content for a scaling of an `n`-pixel edge.
pub fn scaled_extent(n: usize, scale: f64) -> usize {
    ((n as f64 * scale).round() as usize).max(1)
}

/// Applies `spec` to `image`. Quarter-turn rotations are pixel permutations;
/// other angles resample bilinearly about the center with zero fill.
pub fn apply_transform(image: &Image, spec: &TransformSpec, policy: CanvasPolicy) -> Result<Image> {
    match *spec {
        TransformSpec::Identity => Ok(image.clone()),
        TransformSpec::Rotation { angle_deg } => match spec.quarter_turns() {
            Some(0) => Ok(image.clone()),
            Some(k) => image.rot90(k),
            None => Ok(rotate_bilinear(image, angle_deg)),
        },
        TransformSpec::Scaling { scale } => {
            let (ch, cw) = (scaled_extent(image.h, scale), scaled_extent(image.w, scale));
            let content = image.resize(ch, cw)?;
            if policy == CanvasPolicy::Shrink {
                return Ok(content);
            }
            let mut out = Image::zeros(image.h, image.w);
            let top = (image.h as isize - ch as isize) / 2;
            let left = (image.w as isize - cw as isize) / 2;
            for r in 0..image.h {
                for c in 0..image.w {
                    out.data[r * image.w + c] = content.at(r as isize - top, c as isize - left);
                }
            }
            Ok(out)
        }
    }
}

fn rotate_bilinear(image: &Image, angle_deg: f64) -> Image {
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let cy = (image.h as f64 - 1.0) / 2.0;
    let cx = (image.w as f64 - 1.0) / 2.0;
    let mut out = Image::zeros(image.h, image.w);
    for i in 0..image.h {
        for j in 0..image.w {
            let dy = i as f64 - cy;
            let dx = j as f64 - cx;
            let sr = cy + dy * cos + dx * sin;
            let sc = cx - dy * sin + dx * cos;
            let (r0, c0) = (sr.floor(), sc.floor());
            let (fr, fc) = ((sr - r0) as f32, (sc - c0) as f32);
            let (r0, c0) = (r0 as isize, c0 as isize);
            let top = image.at(r0, c0) * (1.0 - fc) + image.at(r0, c0 + 1) * fc;
            let bottom = image.at(r0 + 1, c0) * (1.0 - fc) + image.at(r0 + 1, c0 + 1) * fc;
            out.data[i * image.w + j] = top * (1.0 - fr) + bottom * fr;
        }
    }
    out
}

/// Stacks equally sized images into an `[B, 1, H, W]` batch.
pub fn batch_tensor(images: &[Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Empty("batch has no images".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.h * first.w);
    for im in images {
        if (im.h, im.w) != (first.h, first.w) {
            return Err(Error::config(format!(
                "batch mixes {}x{} and {}x{} images",
                first.h, first.w, im.h, im.w
            )));
        }
        data.extend_from_slice(&im.data);
    }
    Ok(Tensor::new(vec![images.len(), 1, first.h, first.w], data)?)
}

/// Labeled u8 grayscale images, optionally with the transform applied to
/// each one.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    rows: usize,
    cols: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
    split: Split,
    specs: Option<Vec<TransformSpec>>,
}

impl Dataset {
    pub fn new(rows: usize, cols: usize, pixels: Vec<u8>, labels: Vec<u8>, split: Split) -> Result<Self> {
        let per = rows * cols;
        if per == 0 || pixels.len() % per != 0 {
            return Err(Error::config(format!(
                "{} pixels do not form {rows}x{cols} images",
                pixels.len()
            )));
        }
        if pixels.len() / per != labels.len() {
            return Err(Error::CountMismatch {
                images: pixels.len() / per,
                labels: labels.len(),
            });
        }
        Ok(Dataset {
            rows,
            cols,
            pixels,
            labels,
            split,
            specs: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixels(&self, i: usize) -> &[u8] {
        let per = self.rows * self.cols;
        &self.pixels[i * per..(i + 1) * per]
    }

    /// The transform recorded for image `i` (identity when none).
    pub fn spec(&self, i: usize) -> TransformSpec {
        self.specs.as_ref().map_or(TransformSpec::Identity, |s| s[i])
    }

    pub fn has_specs(&self) -> bool {
        self.specs.is_some()
    }

    pub fn with_specs(mut self, specs: Vec<TransformSpec>) -> Result<Self> {
        if specs.len() != self.len() {
            return Err(Error::CountMismatch {
                images: self.len(),
                labels: specs.len(),
            });
        }
        self.specs = Some(specs);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::CountMismatch {
                images: self.len(),
                labels: labels.len(),
            });
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let per = self.rows * self.cols;
        let mut pixels = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            pixels.extend_from_slice(self.pixels(i));
        }
        Dataset {
            rows: self.rows,
            cols: self.cols,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
            specs: self.specs.as_ref().map(|s| indices.iter().map(|&i| s[i]).collect()),
        }
    }

    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Image `i` normalized to `[0, 1]` at its stored size, untransformed.
    pub fn image(&self, i: usize) -> Image {
        Image {
            h: self.rows,
            w: self.cols,
            data: self.pixels(i).iter().map(|&p| p as f32 / 255.0).collect(),
        }
    }

    /// Image `i` normalized and resized to the host input size, untransformed.
    pub fn input_image(&self, i: usize, hw: (usize, usize)) -> Result<Image> {
        self.image(i).resize(hw.0, hw.1)
    }

    /// Image `i` at the host input size with its recorded transform applied.
    pub fn rendered(&self, i: usize, hw: (usize, usize), policy: CanvasPolicy) -> Result<Image> {
        apply_transform(&self.input_image(i, hw)?, &self.spec(i), policy)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn check_magic(path: &Path, bytes: &[u8], header: usize, expected: u32) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            what: "magic".into(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected,
        });
    }
    if bytes.len() < header {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            what: "header".into(),
        });
    }
    Ok(())
}

/// Reads an IDX image file and its matching label file.
pub fn load_mnist_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let img = read_file(images)?;
    check_magic(images, &img, 16, IMAGES_MAGIC)?;
    let n = be_u32(&img, 4) as usize;
    let (rows, cols) = (be_u32(&img, 8) as usize, be_u32(&img, 12) as usize);
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Truncated {
            path: images.to_path_buf(),
            what: "implausible dimensions".into(),
        })?;
    if img.len() < 16 + need {
        return Err(Error::Truncated {
            path: images.to_path_buf(),
            what: format!("{} of {} pixel bytes", img.len() - 16, need),
        });
    }

    let lab = read_file(labels)?;
    check_magic(labels, &lab, 8, LABELS_MAGIC)?;
    let m = be_u32(&lab, 4) as usize;
    if lab.len() < 8 + m {
        return Err(Error::Truncated {
            path: labels.to_path_buf(),
            what: format!("{} of {} labels", lab.len() - 8, m),
        });
    }
    if n != m {
        return Err(Error::CountMismatch { images: n, labels: m });
    }
    Dataset::new(rows, cols, img[16..16 + need].to_vec(), lab[8..8 + m].to_vec(), split)
}

/// Loads a split from a directory holding the canonical MNIST file names.
pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let p = split.file_prefix();
    load_mnist_idx(
        &dir.join(format!("{p}-images-idx3-ubyte")),
        &dir.join(format!("{p}-labels-idx1-ubyte")),
        split,
    )
}

/// `FEATLENS_DATA_DIR` if set, else `data/mnist` under `root`.
pub fn data_dir(root: &Path) -> PathBuf {
    std::env::var_os("FEATLENS_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| root.join("data").join("mnist"))
}

#[derive(Clone, Debug, PartialEq)]
pub enum AngleDistribution {
    /// Uniform over `[lo, hi)` degrees.
    Uniform { lo: f64, hi: f64 },
    Fixed(f64),
    /// Uniform choice among the listed angles.
    Choice(Vec<f64>),
}

impl AngleDistribution {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            AngleDistribution::Uniform { lo, hi } => rng.random_range(*lo..*hi),
            AngleDistribution::Fixed(a) => *a,
            AngleDistribution::Choice(v) => v[rng.random_range(0..v.len())],
        }
    }
}

/// Assigns each image a rotation drawn from `dist`; pixels stay upright at
/// rest and the rotation is applied when rendered.
pub fn make_rotated_dataset(dataset: &Dataset, dist: &AngleDistribution, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = (0..dataset.len())
        .map(|_| TransformSpec::rotation(dist.sample(&mut rng)))
        .collect();
    let mut out = dataset.clone();
    out.specs = Some(specs);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, v: &[f32]) -> Image {
        Image { h, w, data: v.to_vec() }
    }

    #[test]
    fn quarter_turn_is_ccw_permutation() {
        // [[a,b],[c,d]] -> [[b,d],[a,c]]
        let im = img(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let r = apply_transform(&im, &TransformSpec::rotation(90.0), CanvasPolicy::PadToCanvas).unwrap();
        assert_eq!(r.data, vec![2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn bilinear_path_agrees_with_permutation_at_ninety() {
        let im = Image {
            h: 6,
            w: 6,
            data: (0..36).map(|i| i as f32).collect(),
        };
        let exact = apply_transform(&im, &TransformSpec::rotation(90.0), CanvasPolicy::PadToCanvas).unwrap();
        let resampled = rotate_bilinear(&im, 90.0);
        for (a, b) in exact.data.iter().zip(&resampled.data) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn half_scale_centers_content() {
        let im = Image {
            h: 56,
            w: 56,
            data: vec![1.0; 56 * 56],
        };
        let s = apply_transform(&im, &TransformSpec::scaling(0.5).unwrap(), CanvasPolicy::PadToCanvas).unwrap();
        assert_eq!((s.h, s.w), (56, 56));
        let lit: Vec<usize> = (0..56).filter(|&c| s.data[28 * 56 + c] > 0.5).collect();
        assert_eq!(lit.len(), 28);
        assert_eq!(lit[0], 14);
        let shrunk = apply_transform(&im, &TransformSpec::scaling(0.5).unwrap(), CanvasPolicy::Shrink).unwrap();
        assert_eq!((shrunk.h, shrunk.w), (28, 28));
    }

    #[test]
    fn dataset_rejects_count_mismatch() {
        assert!(matches!(
            Dataset::new(2, 2, vec![0; 8], vec![0; 3], Split::Train),
            Err(Error::CountMismatch { .. })
        ));
    }
}
