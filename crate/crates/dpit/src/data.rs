//! Image and dataset IO. Images on disk are 8-bit RGB PNGs; in memory they
//! are [1, 3, H, W] tensors in [0, 1]. A dataset directory holds matching
//! `blended/*.png` and `transmission/*.png` files.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::io(path, source)
}

/// Load a PNG as a [1, 3, H, W] tensor in [0, 1].
pub fn load_image(path: &Path, dtype: DType, device: &Device) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f64; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::from_vec(data, (1, 3, h, w), device)?.to_dtype(dtype)?)
}

/// Save a [1, 3, H, W] or [3, H, W] tensor as an 8-bit PNG. Values are
/// clamped to [0, 1] and quantized with round-half-to-even.
pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    let t = match t.rank() {
        4 => t.get(0)?,
        3 => t.clone(),
        r => {
            return Err(Error::InvalidArgument(format!(
                "save_image expects rank 3 or 4, got {r}"
            )))
        }
    };
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::InvalidArgument(format!(
            "save_image expects 3 channels, got {c}"
        )));
    }
    let data = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut buf = vec![0u8; h * w * 3];
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = data[(ch * h + y) * w + x].clamp(0.0, 1.0);
                buf[(y * w + x) * 3 + ch] = (v * 255.0).round_ties_even() as u8;
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer size matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// A paired dataset directory: `<root>/blended/<name>.png` with matching
/// `<root>/transmission/<name>.png`.
pub struct Dataset {
    pub root: PathBuf,
    pub names: Vec<String>,
}

fn list_pngs(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(io_err(dir))?;
    for entry in entries {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            names.push(
                path.file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default()
                    .to_string(),
            );
        }
    }
    names.sort();
    Ok(names)
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let blended = root.join("blended");
        let transmission = root.join("transmission");
        if !blended.is_dir() || !transmission.is_dir() {
            return Err(Error::Data(format!(
                "{} is not a dataset: missing blended/ or transmission/",
                root.display()
            )));
        }
        let names = list_pngs(&blended)?;
        if names.is_empty() {
            return Err(Error::Data(format!(
                "{} contains no blended PNG images",
                blended.display()
            )));
        }
        let t_names = list_pngs(&transmission)?;
        if names != t_names {
            return Err(Error::Data(format!(
                "{}: blended and transmission file sets differ ({} vs {} images)",
                root.display(),
                names.len(),
                t_names.len()
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            names,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn blended_path(&self, idx: usize) -> PathBuf {
        self.root.join("blended").join(format!("{}.png", self.names[idx]))
    }

    pub fn transmission_path(&self, idx: usize) -> PathBuf {
        self.root
            .join("transmission")
            .join(format!("{}.png", self.names[idx]))
    }

    /// (blended, transmission) pair, both [1, 3, H, W].
    pub fn load_pair(&self, idx: usize, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
        Ok((
            load_image(&self.blended_path(idx), dtype, device)?,
            load_image(&self.transmission_path(idx), dtype, device)?,
        ))
    }

    /// Write one pair; creates the directory layout on first use.
    pub fn write_pair(root: &Path, name: &str, blended: &Tensor, transmission: &Tensor) -> Result<()> {
        save_image(blended, &root.join("blended").join(format!("{name}.png")))?;
        save_image(
            transmission,
            &root.join("transmission").join(format!("{name}.png")),
        )
    }
}

/// If `root` itself is a dataset, returns just it; otherwise every immediate
/// subdirectory that is one (multi-dataset evaluation).
pub fn discover_datasets(root: &Path) -> Result<Vec<Dataset>> {
    if root.join("blended").is_dir() {
        return Ok(vec![Dataset::open(root)?]);
    }
    let mut sets = Vec::new();
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("blended").is_dir())
        .collect();
    subdirs.sort();
    for dir in subdirs {
        sets.push(Dataset::open(&dir)?);
    }
    if sets.is_empty() {
        return Err(Error::Data(format!(
            "{} contains no datasets (expected blended/ + transmission/)",
            root.display()
        )));
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn png_round_trip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        // Values that are exact multiples of 1/255 survive the round trip.
        let vals: Vec<f64> = (0..48).map(|i| (i * 5 % 256) as f64 / 255.0).collect();
        let t = Tensor::from_vec(vals.clone(), (1, 3, 4, 4), &dev()).unwrap();
        save_image(&t, &path).unwrap();
        let back = load_image(&path, DType::F64, &dev()).unwrap();
        let got = back.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in vals.iter().zip(&got) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn save_clamps_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.png");
        let t = Tensor::from_vec(
            vec![-0.5f64, 1.5, 0.0, 1.0, 0.25, 0.75],
            (1, 3, 1, 2),
            &dev(),
        )
        .unwrap();
        save_image(&t, &path).unwrap();
        let back = load_image(&path, DType::F64, &dev()).unwrap();
        let v = back.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 1.0);
    }

    #[test]
    fn dataset_layout_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        assert!(matches!(Dataset::open(root), Err(Error::Data(_))));
        let img = Tensor::rand(0f64, 1f64, (1, 3, 4, 4), &dev()).unwrap();
        Dataset::write_pair(root, "a", &img, &img).unwrap();
        Dataset::write_pair(root, "b", &img, &img).unwrap();
        let ds = Dataset::open(root).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.names, vec!["a", "b"]);
        let (bl, tr) = ds.load_pair(0, DType::F32, &dev()).unwrap();
        assert_eq!(bl.dims(), &[1, 3, 4, 4]);
        assert_eq!(tr.dims(), &[1, 3, 4, 4]);
        // Mismatched file sets are a data error.
        std::fs::remove_file(root.join("transmission/b.png")).unwrap();
        assert!(matches!(Dataset::open(root), Err(Error::Data(_))));
    }

    #[test]
    fn discover_handles_single_and_nested() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::rand(0f64, 1f64, (1, 3, 4, 4), &dev()).unwrap();
        Dataset::write_pair(&dir.path().join("setA"), "a", &img, &img).unwrap();
        Dataset::write_pair(&dir.path().join("setB"), "a", &img, &img).unwrap();
        let sets = discover_datasets(dir.path()).unwrap();
        assert_eq!(sets.len(), 2);
        let single = discover_datasets(&dir.path().join("setA")).unwrap();
        assert_eq!(single.len(), 1);
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(
            discover_datasets(empty.path()),
            Err(Error::Data(_))
        ));
    }
}
