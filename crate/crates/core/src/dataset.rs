//! A posed image collection on disk.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! cameras.txt   COLMAP text cameras
//! images.txt    COLMAP text poses, image names relative to images/
//! points3D.txt  initial point cloud (optional)
//! images/       PPM or PNG files
//! test.txt      held-out image names, one per line (optional)
//! ```

use std::path::{Path, PathBuf};

use crate::colmap::{read_model, read_points, PosedImage};
use crate::error::{Error, Result};
use crate::image::{read_image, ImageBuffer};
use crate::scene::{Camera, Vec3};
use crate::train::TrainView;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub names: Vec<String>,
    pub cameras: Vec<Camera>,
    pub images: Vec<ImageBuffer>,
    pub points: Vec<Vec3>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Rejects any camera whose image has different dimensions.
pub fn check_dimensions(names: &[String], cameras: &[Camera], images: &[ImageBuffer]) -> Result<()> {
    if cameras.len() != images.len() || names.len() != images.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} cameras, {} images, {} names",
            cameras.len(),
            images.len(),
            names.len()
        )));
    }
    for ((name, cam), img) in names.iter().zip(cameras).zip(images) {
        if img.dims() != (cam.width, cam.height) {
            return Err(Error::DimensionMismatch(format!(
                "image {name} is {}x{} but its camera is {}x{}",
                img.width(),
                img.height(),
                cam.width,
                cam.height
            )));
        }
    }
    Ok(())
}

impl Dataset {
    pub fn new(
        root: PathBuf,
        names: Vec<String>,
        cameras: Vec<Camera>,
        images: Vec<ImageBuffer>,
        points: Vec<Vec3>,
        test_names: &[String],
    ) -> Result<Self> {
        check_dimensions(&names, &cameras, &images)?;
        let mut test = Vec::new();
        for t in test_names {
            let i = names
                .iter()
                .position(|n| n == t)
                .ok_or_else(|| Error::Usage(format!("held-out image {t} is not in the dataset")))?;
            test.push(i);
        }
        test.sort_unstable();
        test.dedup();
        let train = (0..names.len()).filter(|i| !test.contains(i)).collect();
        Ok(Self {
            root,
            names,
            cameras,
            images,
            points,
            train,
            test,
        })
    }

    pub fn load(root: &Path) -> Result<Self> {
        let posed = read_model(root)?;
        let images = posed
            .iter()
            .map(|p| read_image(root.join("images").join(&p.name)))
            .collect::<Result<Vec<_>>>()?;
        let points_path = root.join("points3D.txt");
        let points = if points_path.exists() {
            read_points(&points_path)?.into_iter().map(|p| p.position).collect()
        } else {
            Vec::new()
        };
        let test_path = root.join("test.txt");
        let test_names: Vec<String> = if test_path.exists() {
            std::fs::read_to_string(&test_path)
                .map_err(|e| Error::io(&test_path, e))?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect()
        } else {
            Vec::new()
        };
        let (names, cameras) = posed.into_iter().map(|PosedImage { name, camera }| (name, camera)).unzip();
        Self::new(root.to_path_buf(), names, cameras, images, points, &test_names)
    }

    fn views(&self, indices: &[usize]) -> Vec<TrainView> {
        indices
            .iter()
            .map(|&i| TrainView {
                index: i,
                camera: self.cameras[i].clone(),
                image: self.images[i].clone(),
            })
            .collect()
    }

    pub fn train_views(&self) -> Vec<TrainView> {
        self.views(&self.train)
    }

    /// Held-out views, or every view when no split is defined.
    pub fn test_views(&self) -> Vec<TrainView> {
        if self.test.is_empty() {
            self.views(&(0..self.names.len()).collect::<Vec<_>>())
        } else {
            self.views(&self.test)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::front_camera;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{i}.ppm")).collect()
    }

    #[test]
    fn split_follows_held_out_names() {
        let cams = vec![front_camera(2.0, 10.0, 8); 4];
        let imgs = vec![ImageBuffer::new(8, 8); 4];
        let d = Dataset::new(PathBuf::new(), names(4), cams, imgs, vec![], &["2.ppm".to_string()]).unwrap();
        assert_eq!(d.train, vec![0, 1, 3]);
        assert_eq!(d.test, vec![2]);
        assert_eq!(d.test_views()[0].index, 2);
    }

    #[test]
    fn unknown_held_out_name_is_rejected() {
        let r = Dataset::new(
            PathBuf::new(),
            names(1),
            vec![front_camera(2.0, 10.0, 8)],
            vec![ImageBuffer::new(8, 8)],
            vec![],
            &["x.ppm".to_string()],
        );
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    proptest! {
        #[test]
        fn any_dimension_mismatch_is_rejected(
            n in 1usize..5,
            bad in 0usize..5,
            dw in -3i64..4,
            dh in -3i64..4,
        ) {
            prop_assume!(dw != 0 || dh != 0);
            let bad = bad % n;
            let cams = vec![front_camera(2.0, 10.0, 8); n];
            let mut imgs = vec![ImageBuffer::new(8, 8); n];
            imgs[bad] = ImageBuffer::new((8 + dw) as usize, (8 + dh) as usize);
            let r = check_dimensions(&names(n), &cams, &imgs);
            let culprit = format!("{bad}.ppm");
            let named = matches!(&r, Err(Error::DimensionMismatch(m)) if m.contains(&culprit));
            prop_assert!(named);
        }
    }
}
