//! Paired hazy/reference image folders and PNG I/O.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reads an image as a planar `[3, H, W]` tensor in [0, 1].
pub fn load_image(path: &Path) -> Result<Tensor> {
    Ok(rgb_to_tensor(&decode(path)?))
}

fn decode(path: &Path) -> Result<RgbImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

/// Reads an image and bilinearly resizes it to `size × size`.
pub fn load_image_resized(path: &Path, size: usize) -> Result<Tensor> {
    let img = decode(path)?;
    let img = if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    };
    Ok(rgb_to_tensor(&img))
}

fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("image buffer matches shape")
}

/// Writes a `[3, H, W]` (or `[1, 3, H, W]`) tensor as 8-bit PNG, clamping to
/// [0, 1] first.
pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = match image.shape() {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        s => return Err(Error::shape("save_image", format!("expected [3,H,W], got {:?}", s))),
    };
    let plane = h * w;
    let d = image.data();
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([q(d[i]), q(d[plane + i]), q(d[2 * plane + i])])
    });
    buf.save(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Regular files in `dir`, keyed by file name.
pub fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                if !name.starts_with('.') {
                    out.insert(name.to_string(), path);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct PairedDataset {
    pub names: Vec<String>,
    pub hazy: Vec<Tensor>,
    pub reference: Vec<Tensor>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn push(&mut self, name: impl Into<String>, hazy: Tensor, reference: Tensor) -> Result<()> {
        if hazy.shape() != reference.shape() || hazy.rank() != 3 || hazy.dim(0) != 3 {
            return Err(Error::Dataset(format!(
                "pair shapes differ or are not [3,H,W]: {:?} vs {:?}",
                hazy.shape(),
                reference.shape()
            )));
        }
        self.names.push(name.into());
        self.hazy.push(hazy);
        self.reference.push(reference);
        Ok(())
    }

    /// Stacks the listed pairs into `[B, 3, H, W]` tensors.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let first = indices
            .first()
            .ok_or_else(|| Error::Dataset("empty batch".into()))?;
        let shape = self.hazy[*first].shape().to_vec();
        let mut h = Vec::with_capacity(indices.len() * self.hazy[*first].numel());
        let mut r = Vec::with_capacity(h.capacity());
        for &i in indices {
            if self.hazy[i].shape() != shape.as_slice() {
                return Err(Error::Dataset(format!(
                    "{} has shape {:?}, batch expects {:?}",
                    self.names[i],
                    self.hazy[i].shape(),
                    shape
                )));
            }
            h.extend_from_slice(self.hazy[i].data());
            r.extend_from_slice(self.reference[i].data());
        }
        let mut bshape = vec![indices.len()];
        bshape.extend_from_slice(&shape);
        Ok((Tensor::new(bshape.clone(), h)?, Tensor::new(bshape, r)?))
    }
}

/// Loads pairs with matching file names from the two folders, resized to
/// `resolution × resolution`.
pub fn load_dataset(dir_hazy: &Path, dir_ref: &Path, resolution: usize) -> Result<PairedDataset> {
    for dir in [dir_hazy, dir_ref] {
        if !dir.is_dir() {
            return Err(Error::Dataset(format!("directory not found: {}", dir.display())));
        }
    }
    let hazy = list_images(dir_hazy)?;
    let refs = list_images(dir_ref)?;
    if let Some(orphan) = hazy.keys().find(|k| !refs.contains_key(*k)) {
        return Err(Error::Dataset(format!(
            "{} has no reference counterpart in {}",
            orphan,
            dir_ref.display()
        )));
    }
    if let Some(orphan) = refs.keys().find(|k| !hazy.contains_key(*k)) {
        return Err(Error::Dataset(format!(
            "{} has no hazy counterpart in {}",
            orphan,
            dir_hazy.display()
        )));
    }
    if hazy.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", dir_hazy.display())));
    }
    let mut ds = PairedDataset::default();
    for (name, path) in &hazy {
        let h = load_image_resized(path, resolution)?;
        let r = load_image_resized(&refs[name], resolution)?;
        ds.push(name.clone(), h, r)?;
    }
    Ok(ds)
}
