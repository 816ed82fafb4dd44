//! `root/<class_name>/<image>.png` folders and split manifests.

use std::fs;
use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use super::{ClassSet, Dataset, EpisodeError, Sample, Splits};

fn image_err(path: &Path, msg: impl ToString) -> EpisodeError {
    EpisodeError::Image {
        path: path.display().to_string(),
        msg: msg.to_string(),
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>, EpisodeError> {
    let mut out: Vec<_> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    out.sort();
    Ok(out)
}

/// Decodes every PNG under `root/<class>/` to `[C, H, W]` values in `[0, 1]`.
/// Grayscale folders load as one channel; any color image makes the whole
/// dataset RGB. Classes are ordered by directory name.
pub fn load_image_dir(root: &Path) -> Result<Dataset, EpisodeError> {
    let mut raw: Vec<(String, Vec<(std::path::PathBuf, DynamicImage)>)> = vec![];
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut images = vec![];
        for file in sorted_entries(&dir)? {
            let is_png = file
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if !is_png {
                continue;
            }
            let img = image::open(&file).map_err(|e| image_err(&file, e))?;
            images.push((file, img));
        }
        if images.is_empty() {
            return Err(EpisodeError::Dataset(format!(
                "class directory {} contains no PNG images",
                dir.display()
            )));
        }
        raw.push((name, images));
    }
    if raw.is_empty() {
        return Err(EpisodeError::Dataset(format!(
            "{} has no class directories",
            root.display()
        )));
    }
    let color = raw
        .iter()
        .flat_map(|(_, imgs)| imgs.iter())
        .any(|(_, img)| img.color().has_color());
    let channels = if color { 3 } else { 1 };
    let (w0, h0) = {
        let img = &raw[0].1[0].1;
        (img.width(), img.height())
    };
    let mut classes = vec![];
    let mut uid = 0u64;
    for (id, (name, imgs)) in raw.into_iter().enumerate() {
        let mut examples = vec![];
        for (path, img) in imgs {
            if (img.width(), img.height()) != (w0, h0) {
                return Err(image_err(
                    &path,
                    format!(
                        "size {}x{} differs from {w0}x{h0}",
                        img.width(),
                        img.height()
                    ),
                ));
            }
            let hw = (w0 * h0) as usize;
            let mut data = vec![0.0; channels * hw];
            if color {
                let rgb = img.to_rgb8();
                for (p, px) in rgb.pixels().enumerate() {
                    for c in 0..3 {
                        data[c * hw + p] = px[c] as f64 / 255.0;
                    }
                }
            } else {
                for (p, px) in img.to_luma8().pixels().enumerate() {
                    data[p] = px[0] as f64 / 255.0;
                }
            }
            examples.push(Sample { uid, data });
            uid += 1;
        }
        classes.push(ClassSet { id, name, examples });
    }
    Dataset::new(vec![channels, h0 as usize, w0 as usize], classes)
}

/// Writes each example as an 8-bit PNG (values clamped to `[0, 1]`).
pub fn export_image_dir(dataset: &Dataset, root: &Path) -> Result<(), EpisodeError> {
    let [c, h, w] = dataset.input_shape[..] else {
        return Err(EpisodeError::Dataset(format!(
            "only [C, H, W] datasets can be exported, got {:?}",
            dataset.input_shape
        )));
    };
    if c != 1 && c != 3 {
        return Err(EpisodeError::Dataset(format!(
            "cannot export {c}-channel images"
        )));
    }
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let hw = h * w;
    for class in &dataset.classes {
        let dir = root.join(&class.name);
        fs::create_dir_all(&dir)?;
        for s in &class.examples {
            let path = dir.join(format!("{:06}.png", s.uid));
            let res = if c == 1 {
                GrayImage::from_fn(w as u32, h as u32, |x, y| {
                    image::Luma([q(s.data[y as usize * w + x as usize])])
                })
                .save(&path)
            } else {
                RgbImage::from_fn(w as u32, h as u32, |x, y| {
                    let p = y as usize * w + x as usize;
                    image::Rgb([q(s.data[p]), q(s.data[hw + p]), q(s.data[2 * hw + p])])
                })
                .save(&path)
            };
            res.map_err(|e| image_err(&path, e))?;
        }
    }
    Ok(())
}

/// One class name per line.
pub fn write_manifest(path: &Path, names: &[String]) -> Result<(), EpisodeError> {
    let mut text = names.join("\n");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<String>, EpisodeError> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// Per-channel standardization statistics. For `[C, H, W]` inputs the
/// channel is the leading axis; flat feature vectors get one statistic per
/// feature.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    stride: usize,
}

impl Normalizer {
    fn layout(shape: &[usize]) -> (usize, usize) {
        if shape.len() == 3 {
            (shape[0], shape[1] * shape[2])
        } else {
            (shape.iter().product(), 1)
        }
    }

    pub fn fit(train: &Dataset) -> Result<Self, EpisodeError> {
        let (groups, stride) = Self::layout(&train.input_shape);
        let mut sum = vec![0.0; groups];
        let mut count = 0usize;
        for s in train.classes.iter().flat_map(|c| &c.examples) {
            for (g, chunk) in s.data.chunks(stride).enumerate() {
                sum[g] += chunk.iter().sum::<f64>();
            }
            count += stride;
        }
        if count == 0 {
            return Err(EpisodeError::Dataset(
                "cannot fit normalization on an empty split".into(),
            ));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; groups];
        for s in train.classes.iter().flat_map(|c| &c.examples) {
            for (g, chunk) in s.data.chunks(stride).enumerate() {
                sq[g] += chunk.iter().map(|v| (v - mean[g]).powi(2)).sum::<f64>();
            }
        }
        let std = sq
            .iter()
            .map(|v| {
                let s = (v / count as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std, stride })
    }

    pub fn apply(&self, data: &mut Dataset) {
        for s in data.classes.iter_mut().flat_map(|c| c.examples.iter_mut()) {
            for (g, chunk) in s.data.chunks_mut(self.stride).enumerate() {
                for v in chunk {
                    *v = (*v - self.mean[g]) / self.std[g];
                }
            }
        }
    }

    /// Fits on the training split and applies to all three.
    pub fn fit_splits(splits: &mut Splits) -> Result<Self, EpisodeError> {
        let n = Self::fit(&splits.train)?;
        n.apply(&mut splits.train);
        n.apply(&mut splits.val);
        n.apply(&mut splits.test);
        Ok(n)
    }
}
