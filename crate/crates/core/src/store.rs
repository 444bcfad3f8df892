//! Pixel storage for generated patches, kept apart from their metadata so
//! large pools never have to sit in memory at once.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use image::RgbImage;

use crate::imageio::{self, IoError};
use crate::raster::BinaryMask;

pub trait PatchStore: Sync {
    fn put(&self, id: &str, image: &RgbImage, mask: &BinaryMask) -> Result<(), IoError>;
    fn image(&self, id: &str) -> Result<RgbImage, IoError>;
    fn mask(&self, id: &str) -> Result<BinaryMask, IoError>;
}

/// `<dir>/<id>.png` and `<dir>/<id>.mask.png`.
#[derive(Debug, Clone)]
pub struct DirStore {
    dir: PathBuf,
}

impl DirStore {
    pub fn new(dir: &Path) -> Self {
        DirStore { dir: dir.to_path_buf() }
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.png"))
    }

    pub fn mask_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.mask.png"))
    }
}

impl PatchStore for DirStore {
    fn put(&self, id: &str, image: &RgbImage, mask: &BinaryMask) -> Result<(), IoError> {
        imageio::save_png_rgb(&self.image_path(id), image)?;
        imageio::save_mask_png(&self.mask_path(id), mask)
    }

    fn image(&self, id: &str) -> Result<RgbImage, IoError> {
        imageio::load_rgb(&self.image_path(id))
    }

    fn mask(&self, id: &str) -> Result<BinaryMask, IoError> {
        imageio::load_mask_png(&self.mask_path(id))
    }
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    items: Mutex<HashMap<String, (RgbImage, BinaryMask)>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.items.lock().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn missing(id: &str) -> IoError {
    IoError::Io {
        path: format!("memory:{id}"),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such patch"),
    }
}

impl PatchStore for MemoryStore {
    fn put(&self, id: &str, image: &RgbImage, mask: &BinaryMask) -> Result<(), IoError> {
        self.items
            .lock()
            .expect("store lock")
            .insert(id.to_string(), (image.clone(), mask.clone()));
        Ok(())
    }

    fn image(&self, id: &str) -> Result<RgbImage, IoError> {
        self.items
            .lock()
            .expect("store lock")
            .get(id)
            .map(|e| e.0.clone())
            .ok_or_else(|| missing(id))
    }

    fn mask(&self, id: &str) -> Result<BinaryMask, IoError> {
        self.items
            .lock()
            .expect("store lock")
            .get(id)
            .map(|e| e.1.clone())
            .ok_or_else(|| missing(id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_stores_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_pixel(5, 4, image::Rgb([1, 2, 3]));
        let m = BinaryMask::from_fn(5, 4, |x, _| x == 2);
        let stores: [Box<dyn PatchStore>; 2] = [Box::new(DirStore::new(dir.path())), Box::new(MemoryStore::new())];
        for s in stores {
            s.put("c1", &img, &m).unwrap();
            assert_eq!(s.image("c1").unwrap(), img);
            assert_eq!(s.mask("c1").unwrap(), m);
            assert!(s.image("nope").is_err());
        }
    }
}
