use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, RgbImage};

use super::{Mask, PreprocessConfig, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const EXTENSIONS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];
const IMAGES: &str = "images";
const DA_MASKS: &str = "da_masks";
const LANE_MASKS: &str = "lane_masks";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::invalid(format!("unknown split `{other}` (expected train or val)"))),
        }
    }
}

/// Files of one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleFiles {
    pub image: PathBuf,
    pub da_mask: PathBuf,
    pub lane_mask: PathBuf,
}

/// Validated catalog of one split, ordered by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: Split,
    pub ids: Vec<String>,
    pub files: Vec<SampleFiles>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn list(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else {
            continue;
        };
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::Dataset {
                id: stem,
                detail: format!("ambiguous files {} and {}", prev.display(), path.display()),
            });
        }
    }
    Ok(out)
}

fn dimensions(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Indexes `root/<split>/{images,da_masks,lane_masks}`. Every id must have all
/// three files, readable and of equal size.
pub fn load_dataset(root: &Path, split: Split) -> Result<DatasetIndex> {
    let dir = root.join(split.as_str());
    if !dir.is_dir() {
        return Err(Error::io(
            &dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "split directory not found"),
        ));
    }
    let images = list(&dir.join(IMAGES))?;
    let da = list(&dir.join(DA_MASKS))?;
    let lane = list(&dir.join(LANE_MASKS))?;
    let mut all: Vec<&String> = images.keys().chain(da.keys()).chain(lane.keys()).collect();
    all.sort();
    all.dedup();
    let mut index = DatasetIndex {
        root: root.to_path_buf(),
        split,
        ids: Vec::new(),
        files: Vec::new(),
    };
    for id in all {
        let missing = |what: &str| Error::Dataset {
            id: id.clone(),
            detail: format!("missing {what}"),
        };
        let files = SampleFiles {
            image: images.get(id).ok_or_else(|| missing("image"))?.clone(),
            da_mask: da.get(id).ok_or_else(|| missing("drivable mask"))?.clone(),
            lane_mask: lane.get(id).ok_or_else(|| missing("lane mask"))?.clone(),
        };
        let size = dimensions(&files.image)?;
        for mask in [&files.da_mask, &files.lane_mask] {
            let m = dimensions(mask)?;
            if m != size {
                return Err(Error::Dataset {
                    id: id.clone(),
                    detail: format!("{} is {}x{}, image is {}x{}", mask.display(), m.0, m.1, size.0, size.1),
                });
            }
        }
        index.ids.push(id.clone());
        index.files.push(files);
    }
    Ok(index)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// 8-bit RGB as `[3, H, W]` in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[ch * w * h + y as usize * w + x as usize] = p[ch] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Single-channel mask; values ≥ 128 are foreground.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Mask::new(w, h, img.into_raw().into_iter().map(|v| (v >= 128) as u8).collect())
}

fn save(path: &Path, result: image::ImageResult<()>) -> Result<()> {
    result.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_rgb(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let [3, h, w] = image.shape()[..] else {
        return Err(Error::shape("write_rgb", format!("expected [3, H, W], got {:?}", image.shape())));
    };
    let plane = w * h;
    let px = |ch: usize, i: usize| (image.data()[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
    let raw: Vec<u8> = (0..plane).flat_map(|i| [px(0, i), px(1, i), px(2, i)]).collect();
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to image");
    save(path, img.save(path))
}

/// Writes 0/255 grayscale.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let raw = mask.data().iter().map(|&v| v * 255).collect();
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw).expect("buffer sized to mask");
    save(path, img.save(path))
}

/// Writes the three PNG files of `sample` under `root/<split>/`.
pub fn write_sample(root: &Path, split: Split, sample: &Sample) -> Result<()> {
    sample.validate()?;
    let dir = root.join(split.as_str());
    for sub in [IMAGES, DA_MASKS, LANE_MASKS] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let name = format!("{}.png", sample.id);
    write_rgb(&dir.join(IMAGES).join(&name), &sample.image)?;
    write_mask(&dir.join(DA_MASKS).join(&name), &sample.da)?;
    write_mask(&dir.join(LANE_MASKS).join(&name), &sample.lane)
}

/// Reads sample `i` of `index` and applies `cfg`.
pub fn load_sample(index: &DatasetIndex, i: usize, cfg: &PreprocessConfig) -> Result<Sample> {
    let files = index
        .files
        .get(i)
        .ok_or_else(|| Error::invalid(format!("sample {i} out of range for {} samples", index.len())))?;
    let sample = Sample {
        id: index.ids[i].clone(),
        image: read_rgb(&files.image)?,
        da: read_mask(&files.da_mask)?,
        lane: read_mask(&files.lane_mask)?,
    };
    sample.validate()?;
    cfg.apply(&sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    #[test]
    fn write_then_index_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_generate(3, 4, 32, 24).unwrap();
        for s in samples.iter().rev() {
            write_sample(dir.path(), Split::Train, s).unwrap();
        }
        let index = load_dataset(dir.path(), Split::Train).unwrap();
        assert_eq!(index.ids, vec!["000000", "000001", "000002"]);
        let cfg = PreprocessConfig::train(32, 24).eval();
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(&load_sample(&index, i, &cfg).unwrap(), s);
        }
    }

    #[test]
    fn empty_split_gives_empty_index() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("val")).unwrap();
        assert!(load_dataset(dir.path(), Split::Val).unwrap().is_empty());
        assert!(load_dataset(dir.path(), Split::Train).is_err());
    }

    #[test]
    fn missing_lane_mask_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let s = synth_generate(2, 4, 16, 16).unwrap();
        write_sample(dir.path(), Split::Train, &s[0]).unwrap();
        write_sample(dir.path(), Split::Train, &s[1]).unwrap();
        std::fs::remove_file(dir.path().join("train/lane_masks/000001.png")).unwrap();
        match load_dataset(dir.path(), Split::Train).unwrap_err() {
            Error::Dataset { id, detail } => {
                assert_eq!(id, "000001");
                assert!(detail.contains("lane"), "{detail}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn unreadable_image_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let s = synth_generate(1, 4, 16, 16).unwrap();
        write_sample(dir.path(), Split::Train, &s[0]).unwrap();
        std::fs::write(dir.path().join("train/images/000000.png"), b"not a png").unwrap();
        assert!(matches!(load_dataset(dir.path(), Split::Train), Err(Error::Image { .. })));
    }

    #[test]
    fn pnm_masks_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let s = &synth_generate(1, 5, 16, 8).unwrap()[0];
        let base = dir.path().join("val");
        for sub in [IMAGES, DA_MASKS, LANE_MASKS] {
            std::fs::create_dir_all(base.join(sub)).unwrap();
        }
        write_rgb(&base.join("images/a.ppm"), &s.image).unwrap();
        write_mask(&base.join("da_masks/a.pgm"), &s.da).unwrap();
        write_mask(&base.join("lane_masks/a.pgm"), &s.lane).unwrap();
        let index = load_dataset(dir.path(), Split::Val).unwrap();
        let loaded = load_sample(&index, 0, &PreprocessConfig::train(16, 8).eval()).unwrap();
        assert_eq!(loaded.da, s.da);
        assert_eq!(loaded.image, s.image);
    }
}
