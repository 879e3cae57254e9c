use std::fs;
use std::path::{Path, PathBuf};

use super::pnm::{decode_pnm, encode_pnm};
use super::resize::resize_bilinear;
use super::{ClassMap, DataError, Dataset, Image, ImageShape, LabeledImage, Result};

/// Class map file at the dataset root.
pub const CLASS_FILE: &str = "classes.txt";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

fn decode(path: &Path, bytes: &[u8]) -> Result<Image> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let fail = |reason: String| DataError::Decode { path: path.to_path_buf(), reason };
    match ext.as_str() {
        "ppm" | "pgm" | "pnm" => decode_pnm(bytes).map_err(fail),
        "png" | "jpg" | "jpeg" => {
            let img = image::load_from_memory(bytes).map_err(|e| fail(e.to_string()))?;
            let (w, h) = (img.width() as usize, img.height() as usize);
            let (channels, raw) = if img.color().has_color() {
                (3, img.to_rgb8().into_raw())
            } else {
                (1, img.to_luma8().into_raw())
            };
            Image::new(ImageShape::new(h, w, channels), raw.into_iter().map(f32::from).collect())
                .map_err(|e| fail(e.to_string()))
        }
        _ => Err(fail(format!("unsupported file extension `{ext}`"))),
    }
}

/// Decodes an image file at its stored size, channel count and 0..255 range.
pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(path, &bytes)
}

/// Decodes one image file, converts it to `target.channels`, resizes it to
/// `target.height × target.width` and scales pixels into `[0, 1]`.
pub fn load_image(path: &Path, target: ImageShape) -> Result<Image> {
    let raw = read_image(path)?.with_channels(target.channels)?;
    Ok(resize_bilinear(&raw, target.height, target.width).divided(255.0))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let hidden = path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.'));
        if !hidden {
            entries.push(path);
        }
    }
    entries.sort();
    Ok(entries)
}

/// Lists `root/<class_name>/<file>` for every class in `classes` as
/// `(relative path, label)`, in class order and then sorted path order,
/// without decoding anything.
///
/// Plain files directly under `root` (class map, index lists) are ignored;
/// any directory that is not a known class is an error.
pub fn list_dataset(root: &Path, classes: &ClassMap) -> Result<Vec<(String, usize)>> {
    let mut unknown = Vec::new();
    for path in sorted_entries(root)? {
        if path.is_dir() {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            if classes.id(&name).is_none() {
                unknown.push(name);
            }
        }
    }
    if !unknown.is_empty() {
        return Err(DataError::UnknownClasses(unknown));
    }
    let mut listing = Vec::new();
    for (label, name) in classes.names().iter().enumerate() {
        let dir = root.join(name);
        let files: Vec<PathBuf> = if dir.is_dir() {
            sorted_entries(&dir)?.into_iter().filter(|p| p.is_file()).collect()
        } else {
            Vec::new()
        };
        if files.is_empty() {
            return Err(DataError::EmptyClass(name.clone()));
        }
        for path in files {
            let rel = path.strip_prefix(root).unwrap_or(&path);
            listing.push((rel.to_string_lossy().replace('\\', "/"), label));
        }
    }
    Ok(listing)
}

/// Loads the listed `(relative path, label)` files under `root`.
pub fn load_listed(root: &Path, classes: &ClassMap, listing: &[(String, usize)], target: ImageShape) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(listing.len());
    for (rel, label) in listing {
        let pixels = load_image(&root.join(rel), target)?;
        samples.push(LabeledImage { pixels, label: *label, source_path: Some(rel.clone()) });
    }
    Dataset::new(classes.clone(), samples)
}

/// Loads every image of every class in `classes`; see [`list_dataset`].
pub fn load_dataset(root: &Path, classes: &ClassMap, target: ImageShape) -> Result<Dataset> {
    load_listed(root, classes, &list_dataset(root, classes)?, target)
}

pub fn read_class_map(root: &Path) -> Result<ClassMap> {
    let path = root.join(CLASS_FILE);
    ClassMap::parse(&fs::read_to_string(&path).map_err(io_err(&path))?)
}

pub fn write_class_map(root: &Path, classes: &ClassMap) -> Result<()> {
    let path = root.join(CLASS_FILE);
    fs::write(&path, classes.to_text()).map_err(io_err(&path))
}

/// Writes the dataset as `root/<class>/<class>_<nnnnn>.ppm` (or `.pgm`)
/// plus the class map, and returns the relative paths in sample order.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    write_class_map(root, &dataset.classes)?;
    for name in dataset.classes.names() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let mut per_class = vec![0usize; dataset.classes.len()];
    let mut written = Vec::with_capacity(dataset.len());
    for sample in &dataset.samples {
        let name = dataset.classes.name(sample.label).expect("validated label");
        let ext = if sample.pixels.shape().channels == 1 { "pgm" } else { "ppm" };
        let rel = format!("{name}/{name}_{:05}.{ext}", per_class[sample.label]);
        per_class[sample.label] += 1;
        let path = root.join(&rel);
        let bytes = encode_pnm(&sample.pixels).map_err(|reason| DataError::Decode { path: path.clone(), reason })?;
        fs::write(&path, bytes).map_err(io_err(&path))?;
        written.push(rel);
    }
    Ok(written)
}
