//! Labeled patches, slide bags and the on-disk dataset layout
//! (`images/<instance_id>.png`, `manifest.csv`, `spec.json`).

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::backbone::Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    pub image: Image,
    pub label: usize,
    pub instance_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBag {
    pub patches: Vec<LabeledPatch>,
    pub slide_label: usize,
    pub slide_id: String,
}

impl LabeledBag {
    /// Builds a bag whose label is the highest member grade.
    pub fn from_patches(slide_id: impl Into<String>, patches: Vec<LabeledPatch>) -> Result<Self> {
        let slide_label = max_grade(&patches)?;
        Ok(Self {
            patches,
            slide_label,
            slide_id: slide_id.into(),
        })
    }
}

pub fn max_grade(patches: &[LabeledPatch]) -> Result<usize> {
    patches
        .iter()
        .map(|p| p.label)
        .max()
        .ok_or_else(|| Error::Input("a bag needs at least one patch".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Patches(Vec<LabeledPatch>),
    Bags(Vec<LabeledBag>),
}

/// Borrowed view of one training or evaluation example.
#[derive(Debug, Clone, Copy)]
pub enum Item<'d> {
    Patch(&'d LabeledPatch),
    Bag(&'d LabeledBag),
}

impl Item<'_> {
    pub fn label(&self) -> usize {
        match self {
            Item::Patch(p) => p.label,
            Item::Bag(b) => b.slide_label,
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Patches(p) => p.len(),
            Dataset::Bags(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn item(&self, i: usize) -> Item<'_> {
        match self {
            Dataset::Patches(p) => Item::Patch(&p[i]),
            Dataset::Bags(b) => Item::Bag(&b[i]),
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.item(i).label()).collect()
    }

    pub fn is_bags(&self) -> bool {
        matches!(self, Dataset::Bags(_))
    }

    /// The examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        match self {
            Dataset::Patches(p) => Dataset::Patches(indices.iter().map(|&i| p[i].clone()).collect()),
            Dataset::Bags(b) => Dataset::Bags(indices.iter().map(|&i| b[i].clone()).collect()),
        }
    }

    /// Every image with its patch label and (for bags) slide id.
    fn flat_patches(&self) -> Vec<(&LabeledPatch, &str)> {
        match self {
            Dataset::Patches(p) => p.iter().map(|x| (x, "")).collect(),
            Dataset::Bags(b) => b
                .iter()
                .flat_map(|bag| bag.patches.iter().map(move |x| (x, bag.slide_id.as_str())))
                .collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    path: String,
    label: usize,
    slide_id: String,
}

pub fn image_to_rgb8(image: &Image) -> RgbImage {
    let (h, w, _) = image.dim();
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| (image[[y, x, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
            out.put_pixel(x as u32, y as u32, Rgb([px(0), px(1), px(2)]));
        }
    }
    out
}

pub fn rgb8_to_image(img: &RgbImage) -> Image {
    let (w, h) = img.dimensions();
    Image::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

/// Writes images and `manifest.csv` under `dir`; `spec` is stored as `spec.json`.
pub fn write_dataset<S: Serialize>(dir: &Path, dataset: &Dataset, spec: &S) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(dir.join("manifest.csv"))?;
    for (patch, slide_id) in dataset.flat_patches() {
        let rel = format!("images/{}.png", patch.instance_id);
        image_to_rgb8(&patch.image).save(dir.join(&rel))?;
        writer.serialize(ManifestRow {
            path: rel,
            label: patch.label,
            slide_id: slide_id.to_string(),
        })?;
    }
    writer.flush()?;
    fs::write(dir.join("spec.json"), serde_json::to_string_pretty(spec)? + "\n")?;
    Ok(())
}

/// Reads a dataset directory. Rows with a non-empty `slide_id` are grouped
/// into bags in order of first appearance; bag labels follow the max-grade rule.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join("manifest.csv");
    if !manifest.is_file() {
        return Err(Error::MissingDataset(manifest.display().to_string()));
    }
    let mut reader = csv::Reader::from_path(&manifest)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "label", "slide_id"] {
        return Err(Error::Input(format!(
            "{}: header must be path,label,slide_id",
            manifest.display()
        )));
    }
    let mut patches = Vec::new();
    let mut slides: Vec<(String, Vec<LabeledPatch>)> = Vec::new();
    for row in reader.deserialize() {
        let row: ManifestRow = row?;
        let path: PathBuf = dir.join(&row.path);
        let img = image::open(&path)?.to_rgb8();
        let instance_id = Path::new(&row.path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| row.path.clone());
        let patch = LabeledPatch {
            image: rgb8_to_image(&img),
            label: row.label,
            instance_id,
        };
        if row.slide_id.is_empty() {
            patches.push(patch);
        } else {
            match slides.iter_mut().find(|(id, _)| *id == row.slide_id) {
                Some((_, members)) => members.push(patch),
                None => slides.push((row.slide_id, vec![patch])),
            }
        }
    }
    match (patches.is_empty(), slides.is_empty()) {
        (false, true) => Ok(Dataset::Patches(patches)),
        (true, false) => Ok(Dataset::Bags(
            slides
                .into_iter()
                .map(|(id, members)| LabeledBag::from_patches(id, members))
                .collect::<Result<_>>()?,
        )),
        (true, true) => Err(Error::Input(format!("{}: manifest has no rows", manifest.display()))),
        (false, false) => Err(Error::Input(format!(
            "{}: mixes patch rows and slide rows",
            manifest.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(label: usize, id: &str, shade: f64) -> LabeledPatch {
        LabeledPatch {
            image: Image::from_elem((4, 4, 3), shade),
            label,
            instance_id: id.into(),
        }
    }

    #[test]
    fn max_grade_rule() {
        let bag = LabeledBag::from_patches("s", vec![patch(0, "a", 0.1), patch(0, "b", 0.2)]).unwrap();
        assert_eq!(bag.slide_label, 0);
        let bag = LabeledBag::from_patches("s", vec![patch(0, "a", 0.1), patch(0, "b", 0.2), patch(3, "c", 0.3)]).unwrap();
        assert_eq!(bag.slide_label, 3);
        assert!(LabeledBag::from_patches("s", vec![]).is_err());
    }

    #[test]
    fn directory_round_trip_for_bags() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::Bags(vec![
            LabeledBag::from_patches("s0", vec![patch(1, "a", 0.2), patch(2, "b", 0.4)]).unwrap(),
            LabeledBag::from_patches("s1", vec![patch(0, "c", 1.0)]).unwrap(),
        ]);
        write_dataset(dir.path(), &ds, &serde_json::json!({"kind": "test"})).unwrap();
        let manifest = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        assert!(manifest.starts_with("path,label,slide_id\nimages/a.png,1,s0\n"));
        assert!(!manifest.contains('\r'));
        let back = read_dataset(dir.path()).unwrap();
        let Dataset::Bags(bags) = back else { panic!("expected bags") };
        assert_eq!(bags.len(), 2);
        assert_eq!(bags[0].slide_label, 2);
        assert_eq!(bags[1].patches[0].image[[0, 0, 0]], 1.0);
        // 8-bit quantization
        assert!((bags[0].patches[0].image[[1, 1, 1]] - 51.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn missing_manifest_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_dataset(&dir.path().join("nope")).unwrap_err();
        assert!(matches!(err, Error::MissingDataset(ref p) if p.contains("nope")));
    }
}
