//! Tensor conventions, dataset ingestion and evaluation splits.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array2, Array3, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Declared value interval of an [`ImageBatch`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueRange {
    /// `[0, 1]`, the storage range produced by decoding.
    Unit,
    /// `[-1, 1]`, the range every model consumes.
    Symmetric,
}

impl ValueRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Symmetric => (-1.0, 1.0),
        }
    }
}

/// A batch of images shaped `(N, C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    data: Array4<f64>,
    range: ValueRange,
}

impl ImageBatch {
    pub fn new(data: Array4<f64>, range: ValueRange) -> Result<Self> {
        let (n, c, _, _) = data.dim();
        if n == 0 {
            return Err(invalid!("image batch must hold at least one image"));
        }
        if c != 1 && c != 3 {
            return Err(invalid!("images must have 1 or 3 channels, got {c}"));
        }
        let (lo, hi) = range.bounds();
        if let Some(v) = data.iter().find(|v| !(lo..=hi).contains(*v)) {
            return Err(invalid!("value {v} outside declared range [{lo}, {hi}]"));
        }
        Ok(Self { data, range })
    }

    /// Builds a batch from rows of flattened `C*H*W` pixels.
    pub fn from_flat(
        rows: ArrayView2<'_, f64>,
        shape: (usize, usize, usize),
        range: ValueRange,
    ) -> Result<Self> {
        let (c, h, w) = shape;
        if rows.ncols() != c * h * w {
            return Err(Error::Shape(format!(
                "row width {} does not match {c}x{h}x{w}",
                rows.ncols()
            )));
        }
        let data = rows
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows.nrows(), c, h, w))
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(data, range)
    }

    /// Like [`ImageBatch::from_flat`], clamping values into the range first.
    pub fn from_flat_clamped(
        rows: ArrayView2<'_, f64>,
        shape: (usize, usize, usize),
        range: ValueRange,
    ) -> Result<Self> {
        let (lo, hi) = range.bounds();
        let clamped = rows.mapv(|v| v.clamp(lo, hi));
        Self::from_flat(clamped.view(), shape, range)
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn len(&self) -> usize {
        self.data.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(C, H, W)`
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.data.dim();
        (c, h, w)
    }

    pub fn pixels_per_image(&self) -> usize {
        let (c, h, w) = self.image_shape();
        c * h * w
    }

    /// Rows of flattened pixels, one per image.
    pub fn flatten(&self) -> Array2<f64> {
        let n = self.len();
        let d = self.pixels_per_image();
        self.data
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, d))
            .expect("standard layout reshape")
    }

    pub fn to_model_range(&self) -> ImageBatch {
        match self.range {
            ValueRange::Symmetric => self.clone(),
            ValueRange::Unit => ImageBatch {
                data: self.data.mapv(|v| (2.0 * v - 1.0).clamp(-1.0, 1.0)),
                range: ValueRange::Symmetric,
            },
        }
    }

    pub fn to_storage_range(&self) -> ImageBatch {
        match self.range {
            ValueRange::Unit => self.clone(),
            ValueRange::Symmetric => ImageBatch {
                data: self.data.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)),
                range: ValueRange::Unit,
            },
        }
    }

    pub fn select(&self, indices: &[usize]) -> Result<ImageBatch> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(invalid!("index {bad} out of range for batch of {}", self.len()));
        }
        ImageBatch::new(self.data.select(Axis(0), indices), self.range)
    }

    /// Splits into `[0, at)` and `[at, N)`. Both halves must be nonempty.
    pub fn split_at(&self, at: usize) -> Result<(ImageBatch, ImageBatch)> {
        if at == 0 || at >= self.len() {
            return Err(invalid!("split point {at} leaves an empty half"));
        }
        Ok((
            ImageBatch { data: self.data.slice(s![..at, .., .., ..]).to_owned(), range: self.range },
            ImageBatch { data: self.data.slice(s![at.., .., .., ..]).to_owned(), range: self.range },
        ))
    }

    pub fn concat(batches: &[&ImageBatch]) -> Result<ImageBatch> {
        let first = batches.first().ok_or_else(|| invalid!("nothing to concatenate"))?;
        for b in batches {
            if b.range != first.range || b.image_shape() != first.image_shape() {
                return Err(Error::Shape("batches differ in shape or value range".into()));
            }
        }
        let views: Vec<_> = batches.iter().map(|b| b.data.view()).collect();
        let data = concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(ImageBatch { data, range: first.range })
    }

    /// Bilinear resize with half-pixel centres (corners not aligned).
    pub fn resize(&self, height: usize, width: usize) -> Result<ImageBatch> {
        if height == 0 || width == 0 {
            return Err(invalid!("target size must be positive"));
        }
        let (n, c, h, w) = self.data.dim();
        if (h, w) == (height, width) {
            return Ok(self.clone());
        }
        let mut out = Array4::<f64>::zeros((n, c, height, width));
        for i in 0..n {
            for ch in 0..c {
                let plane = self.data.slice(s![i, ch, .., ..]);
                let resized = resize_plane(plane, height, width);
                out.slice_mut(s![i, ch, .., ..]).assign(&resized);
            }
        }
        ImageBatch::new(out, self.range)
    }
}

fn source_coord(dst: usize, scale: f64, len: usize) -> (usize, usize, f64) {
    let x = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let x0 = (x.floor() as usize).min(len - 1);
    let x1 = (x0 + 1).min(len - 1);
    (x0, x1, x - x0 as f64)
}

fn resize_plane(plane: ArrayView2<'_, f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = plane.dim();
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    let cols: Vec<_> = (0..width).map(|x| source_coord(x, sx, w)).collect();
    Array2::from_shape_fn((height, width), |(y, x)| {
        let (y0, y1, fy) = source_coord(y, sy, h);
        let (x0, x1, fx) = cols[x];
        let top = plane[[y0, x0]] * (1.0 - fx) + plane[[y0, x1]] * fx;
        let bottom = plane[[y1, x0]] * (1.0 - fx) + plane[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

/// A `K`-class dataset with one string identity per sample.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub images: ImageBatch,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split_tag: SplitTag,
    /// Stable sample identities (file paths for on-disk data).
    pub ids: Vec<String>,
}

impl LabeledDataset {
    pub fn new(
        images: ImageBatch,
        labels: Vec<usize>,
        class_names: Vec<String>,
        split_tag: SplitTag,
        ids: Vec<String>,
    ) -> Result<Self> {
        if labels.len() != images.len() || ids.len() != images.len() {
            return Err(invalid!(
                "{} images but {} labels and {} ids",
                images.len(),
                labels.len(),
                ids.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(invalid!("label {bad} >= class count {}", class_names.len()));
        }
        Ok(Self { images, labels, class_names, split_tag, ids })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == class).then_some(i))
            .collect()
    }

    pub fn indices_except(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l != class).then_some(i))
            .collect()
    }

    /// Images and ids of the given sample indices.
    pub fn side(&self, indices: &[usize]) -> Result<SplitSide> {
        Ok(SplitSide {
            images: self.images.select(indices)?,
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
        })
    }

    pub fn class_side(&self, class: usize) -> Result<SplitSide> {
        self.check_class(class)?;
        let idx = self.indices_of(class);
        if idx.is_empty() {
            return Err(invalid!("class '{}' has no samples", self.class_names[class]));
        }
        self.side(&idx)
    }

    pub fn resized(&self, height: usize, width: usize) -> Result<LabeledDataset> {
        Ok(LabeledDataset { images: self.images.resize(height, width)?, ..self.clone() })
    }

    pub fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes() {
            return Err(invalid!("class id {class} >= class count {}", self.num_classes()));
        }
        Ok(())
    }
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::Ingestion(format!("cannot read '{}': {e}", dir.display())))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.retain(|p| {
        !p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.'))
    });
    entries.sort();
    Ok(entries)
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    if !ext.as_deref().is_some_and(|e| IMAGE_EXTENSIONS.contains(&e)) {
        return Err(Error::Decode { path: path.into(), reason: "not a PNG or JPEG file".into() });
    }
    image::open(path).map_err(|e| Error::Decode { path: path.into(), reason: e.to_string() })
}

fn to_planes(img: &image::DynamicImage, channels: usize) -> Array3<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if channels == 1 {
        let g = img.to_luma8();
        Array3::from_shape_fn((1, h, w), |(_, y, x)| g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0)
    } else {
        let rgb = img.to_rgb8();
        Array3::from_shape_fn((3, h, w), |(c, y, x)| rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
    }
}

/// Loads a directory-per-class image tree.
///
/// Class ids follow sorted subdirectory names, samples follow sorted file
/// names. Images are resized to `size` and scaled to `[0, 1]`. The result is
/// single-channel when every image decodes as grayscale, RGB otherwise.
pub fn load_dataset(root: &Path, size: (usize, usize), split_tag: SplitTag) -> Result<LabeledDataset> {
    if !root.is_dir() {
        return Err(Error::Ingestion(format!("'{}' is not a directory", root.display())));
    }
    let class_dirs: Vec<_> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Ingestion(format!("'{}' has no class subdirectories", root.display())));
    }
    let mut decoded = Vec::new();
    let mut class_names = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let files: Vec<_> = sorted_entries(dir)?.into_iter().filter(|p| p.is_file()).collect();
        if files.is_empty() {
            return Err(Error::Ingestion(format!("class '{name}' has no images")));
        }
        for f in files {
            decoded.push((decode(&f)?, label, f));
        }
        class_names.push(name);
    }
    let grayscale = decoded.iter().all(|(img, _, _)| !img.color().has_color());
    let channels = if grayscale { 1 } else { 3 };
    let (height, width) = size;
    let mut data = Array4::<f64>::zeros((decoded.len(), channels, height, width));
    for (i, (img, _, _)) in decoded.iter().enumerate() {
        let planes = to_planes(img, channels);
        for c in 0..channels {
            let resized = resize_plane(planes.slice(s![c, .., ..]), height, width);
            data.slice_mut(s![i, c, .., ..]).assign(&resized);
        }
    }
    // interpolation never leaves the convex hull of [0,1] inputs, clamp guards rounding
    data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    let labels = decoded.iter().map(|(_, l, _)| *l).collect();
    let ids = decoded.iter().map(|(_, _, p)| p.display().to_string()).collect();
    LabeledDataset::new(ImageBatch::new(data, ValueRange::Unit)?, labels, class_names, split_tag, ids)
}

/// Decodes a flat list of image files in the given order, resized to `size`
/// with `channels` planes, in `[0, 1]`.
pub fn load_images(paths: &[PathBuf], size: (usize, usize), channels: usize) -> Result<ImageBatch> {
    if paths.is_empty() {
        return Err(invalid!("no image files given"));
    }
    if channels != 1 && channels != 3 {
        return Err(invalid!("channels must be 1 or 3, got {channels}"));
    }
    let (height, width) = size;
    let mut data = Array4::<f64>::zeros((paths.len(), channels, height, width));
    for (i, p) in paths.iter().enumerate() {
        let planes = to_planes(&decode(p)?, channels);
        for c in 0..channels {
            let resized = resize_plane(planes.slice(s![c, .., ..]), height, width);
            data.slice_mut(s![i, c, .., ..]).assign(&resized);
        }
    }
    data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    ImageBatch::new(data, ValueRange::Unit)
}

/// PNG bytes of image `index`, quantized to 8 bits per channel.
pub fn encode_png(batch: &ImageBatch, index: usize) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    if index >= batch.len() {
        return Err(invalid!("index {index} out of range for batch of {}", batch.len()));
    }
    let unit = batch.to_storage_range();
    let (c, h, w) = unit.image_shape();
    let mut raw = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                raw.push((unit.data[[index, ch, y, x]] * 255.0).round() as u8);
            }
        }
    }
    let color = if c == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&raw, w as u32, h as u32, color)
        .map_err(|e| Error::Format(format!("PNG encoding failed: {e}")))?;
    Ok(out)
}

/// One side of an evaluation split.
#[derive(Clone, Debug)]
pub struct SplitSide {
    pub images: ImageBatch,
    pub ids: Vec<String>,
}

impl SplitSide {
    pub fn new(images: ImageBatch, ids: Vec<String>) -> Result<Self> {
        if ids.len() != images.len() {
            return Err(invalid!("{} images but {} ids", images.len(), ids.len()));
        }
        Ok(Self { images, ids })
    }

    /// Ids of the form `{prefix}{index}`.
    pub fn with_index_ids(images: ImageBatch, prefix: &str) -> Self {
        let ids = (0..images.len()).map(|i| format!("{prefix}{i}")).collect();
        Self { images, ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnomalySource {
    OtherClasses { class_ids: Vec<usize> },
    OtherDataset { dataset: String, class_id: usize, class_name: String },
    SyntheticPool { pool: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset: String,
    pub normal_class: usize,
    pub normal_class_name: String,
    pub anomaly_source: AnomalySource,
}

/// Labeled novelty-detection split.
#[derive(Clone, Debug)]
pub struct NDSplit {
    /// Absent for scoring-only splits.
    pub normal_train: Option<SplitSide>,
    pub normal_test: SplitSide,
    pub anomalous_test: SplitSide,
    pub provenance: Provenance,
}

impl NDSplit {
    pub fn new(
        normal_train: Option<SplitSide>,
        normal_test: SplitSide,
        anomalous_test: SplitSide,
        provenance: Provenance,
    ) -> Result<Self> {
        if anomalous_test.is_empty() {
            return Err(invalid!("anomalous test side is empty"));
        }
        if let Some(train) = &normal_train {
            let train_ids: HashSet<&str> = train.ids.iter().map(String::as_str).collect();
            if let Some(shared) = normal_test.ids.iter().find(|id| train_ids.contains(id.as_str())) {
                return Err(invalid!("sample '{shared}' appears in both normal train and normal test"));
            }
        }
        Ok(Self { normal_train, normal_test, anomalous_test, provenance })
    }

    pub fn manifest(&self) -> SplitManifest {
        SplitManifest {
            provenance: self.provenance.clone(),
            normal_train: self.normal_train.as_ref().map(|s| s.ids.clone()).unwrap_or_default(),
            normal_test: self.normal_test.ids.clone(),
            anomalous_test: self.anomalous_test.ids.clone(),
        }
    }
}

/// JSON listing of sample identities per split side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub provenance: Provenance,
    pub normal_train: Vec<String>,
    pub normal_test: Vec<String>,
    pub anomalous_test: Vec<String>,
}

fn dataset_name(ds: &LabeledDataset) -> String {
    ds.ids
        .first()
        .and_then(|id| Path::new(id).parent()?.parent().map(|p| p.display().to_string()))
        .unwrap_or_else(|| "in-memory".to_string())
}

/// One class as normal, every other test class as anomalous.
pub fn make_one_vs_all_split(
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    normal_class: usize,
) -> Result<NDSplit> {
    train_ds.check_class(normal_class)?;
    test_ds.check_class(normal_class)?;
    let normal_train = train_ds.class_side(normal_class)?;
    let normal_test = test_ds.class_side(normal_class)?;
    let anomalous_test = test_ds.side(&test_ds.indices_except(normal_class))?;
    let mut others: Vec<usize> = (0..test_ds.num_classes()).filter(|&c| c != normal_class).collect();
    others.retain(|c| test_ds.labels.contains(c));
    NDSplit::new(
        Some(normal_train),
        normal_test,
        anomalous_test,
        Provenance {
            dataset: dataset_name(train_ds),
            normal_class,
            normal_class_name: train_ds.class_names[normal_class].clone(),
            anomaly_source: AnomalySource::OtherClasses { class_ids: others },
        },
    )
}

/// Normal class from one dataset, anomalies from a single class of another.
pub fn make_near_nd_split(
    normal_train_ds: &LabeledDataset,
    normal_test_ds: &LabeledDataset,
    aux_test_ds: &LabeledDataset,
    normal_class: usize,
    near_class: usize,
) -> Result<NDSplit> {
    aux_test_ds.check_class(near_class)?;
    if normal_test_ds.images.image_shape() != aux_test_ds.images.image_shape() {
        return Err(Error::Shape("auxiliary images differ in shape from normal images".into()));
    }
    let normal_train = normal_train_ds.class_side(normal_class)?;
    let normal_test = normal_test_ds.class_side(normal_class)?;
    let anomalous_test = aux_test_ds.class_side(near_class)?;
    NDSplit::new(
        Some(normal_train),
        normal_test,
        anomalous_test,
        Provenance {
            dataset: dataset_name(normal_train_ds),
            normal_class,
            normal_class_name: normal_train_ds.class_names[normal_class].clone(),
            anomaly_source: AnomalySource::OtherDataset {
                dataset: dataset_name(aux_test_ds),
                class_id: near_class,
                class_name: aux_test_ds.class_names[near_class].clone(),
            },
        },
    )
}
