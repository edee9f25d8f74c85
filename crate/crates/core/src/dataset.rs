//! Face images paired with landmark files.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::landmarks::LandmarkSet;

#[derive(Debug, Clone)]
pub struct FaceRecord {
    pub id: String,
    pub image: Image,
    /// `None` when no landmark file was found; consumers skip such records.
    pub landmarks: Option<LandmarkSet>,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Sorted image paths in `dir` with a png/jpeg extension.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn image_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads every image in `images` together with `landmarks/<stem>.txt`.
/// A missing landmark file leaves `landmarks` empty; a malformed one is an error.
pub fn load_faces(images: impl AsRef<Path>, landmarks: impl AsRef<Path>) -> Result<Vec<FaceRecord>> {
    let mut out = Vec::new();
    for path in list_images(images)? {
        let id = image_id(&path);
        let lm_path = landmarks.as_ref().join(format!("{id}.txt"));
        let lm = if lm_path.exists() {
            Some(LandmarkSet::load(&lm_path).map_err(|e| Error::Data(format!("{}: {e}", lm_path.display())))?)
        } else {
            None
        };
        out.push(FaceRecord {
            id,
            image: Image::load(&path)?,
            landmarks: lm,
        });
    }
    Ok(out)
}

/// Writes `<dir_images>/<id>.png` and `<dir_landmarks>/<id>.txt` for each record.
pub fn save_faces(records: &[FaceRecord], images: impl AsRef<Path>, landmarks: impl AsRef<Path>) -> Result<()> {
    std::fs::create_dir_all(images.as_ref())?;
    std::fs::create_dir_all(landmarks.as_ref())?;
    for r in records {
        r.image.save(images.as_ref().join(format!("{}.png", r.id)))?;
        if let Some(lm) = &r.landmarks {
            lm.save(landmarks.as_ref().join(format!("{}.txt", r.id)))?;
        }
    }
    Ok(())
}
