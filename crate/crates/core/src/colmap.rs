//! COLMAP text model: `cameras.txt`, `images.txt` and `points3D.txt`.
//!
//! Only the `PINHOLE` and `SIMPLE_PINHOLE` camera models are accepted.
//! Poses are world-to-camera with a `[qw, qx, qy, qz]` rotation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Rotation3, UnitQuaternion};

use crate::error::{Error, Result};
use crate::scene::{rotation_from_quat, Camera, Mat3, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CameraModel {
    SimplePinhole,
    Pinhole,
}

impl CameraModel {
    pub fn name(self) -> &'static str {
        match self {
            CameraModel::SimplePinhole => "SIMPLE_PINHOLE",
            CameraModel::Pinhole => "PINHOLE",
        }
    }

    fn param_count(self) -> usize {
        match self {
            CameraModel::SimplePinhole => 3,
            CameraModel::Pinhole => 4,
        }
    }
}

/// One `cameras.txt` entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Intrinsics {
    pub id: u32,
    pub model: CameraModel,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// One `images.txt` entry (the 2D observations line is ignored).
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePose {
    pub id: u32,
    /// `[qw, qx, qy, qz]`.
    pub qvec: [f64; 4],
    pub tvec: Vec3,
    pub camera_id: u32,
    pub name: String,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point3D {
    pub id: u64,
    pub position: Vec3,
    pub color: [u8; 3],
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn field<T: FromStr>(path: &Path, line: usize, tokens: &[&str], i: usize, what: &str) -> Result<T> {
    let tok = tokens
        .get(i)
        .ok_or_else(|| parse_err(path, line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| parse_err(path, line, format!("bad {what} `{tok}`")))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Parses `cameras.txt`; `path` is only used in error messages.
pub fn parse_cameras(text: &str, path: &Path) -> Result<BTreeMap<u32, Intrinsics>> {
    let mut out = BTreeMap::new();
    for (line, l) in content_lines(text) {
        let t: Vec<&str> = l.split_whitespace().collect();
        let id: u32 = field(path, line, &t, 0, "camera id")?;
        let model_name = *t.get(1).ok_or_else(|| parse_err(path, line, "missing camera model"))?;
        let model = match model_name {
            "SIMPLE_PINHOLE" => CameraModel::SimplePinhole,
            "PINHOLE" => CameraModel::Pinhole,
            other => return Err(Error::UnsupportedModel(other.to_string())),
        };
        let width: usize = field(path, line, &t, 2, "width")?;
        let height: usize = field(path, line, &t, 3, "height")?;
        let params = (0..model.param_count())
            .map(|i| field::<f64>(path, line, &t, 4 + i, "camera parameter"))
            .collect::<Result<Vec<_>>>()?;
        if t.len() != 4 + params.len() {
            return Err(parse_err(
                path,
                line,
                format!("{} takes {} parameters, found {}", model.name(), params.len(), t.len() - 4),
            ));
        }
        let (fx, fy, cx, cy) = match model {
            CameraModel::SimplePinhole => (params[0], params[0], params[1], params[2]),
            CameraModel::Pinhole => (params[0], params[1], params[2], params[3]),
        };
        let cam = Intrinsics {
            id,
            model,
            width,
            height,
            fx,
            fy,
            cx,
            cy,
        };
        if out.insert(id, cam).is_some() {
            return Err(parse_err(path, line, format!("duplicate camera id {id}")));
        }
    }
    Ok(out)
}

/// Parses `images.txt`. Each image takes two lines; the second (2D
/// observations) may be empty.
pub fn parse_images(text: &str, path: &Path) -> Result<Vec<ImagePose>> {
    let mut out = Vec::new();
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    while let Some((line, l)) = lines.next() {
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let t: Vec<&str> = l.split_whitespace().collect();
        if t.len() != 10 {
            return Err(parse_err(path, line, format!("expected 10 fields, found {}", t.len())));
        }
        let id: u32 = field(path, line, &t, 0, "image id")?;
        let q: [f64; 4] = [
            field(path, line, &t, 1, "qw")?,
            field(path, line, &t, 2, "qx")?,
            field(path, line, &t, 3, "qy")?,
            field(path, line, &t, 4, "qz")?,
        ];
        let tvec = Vec3::new(
            field(path, line, &t, 5, "tx")?,
            field(path, line, &t, 6, "ty")?,
            field(path, line, &t, 7, "tz")?,
        );
        let camera_id: u32 = field(path, line, &t, 8, "camera id")?;
        out.push(ImagePose {
            id,
            qvec: q,
            tvec,
            camera_id,
            name: t[9].to_string(),
        });
        // Observations line.
        lines.next();
    }
    Ok(out)
}

/// Parses `points3D.txt`, ignoring error and track fields.
pub fn parse_points(text: &str, path: &Path) -> Result<Vec<Point3D>> {
    content_lines(text)
        .map(|(line, l)| {
            let t: Vec<&str> = l.split_whitespace().collect();
            Ok(Point3D {
                id: field(path, line, &t, 0, "point id")?,
                position: Vec3::new(
                    field(path, line, &t, 1, "x")?,
                    field(path, line, &t, 2, "y")?,
                    field(path, line, &t, 3, "z")?,
                ),
                color: [
                    field(path, line, &t, 4, "red")?,
                    field(path, line, &t, 5, "green")?,
                    field(path, line, &t, 6, "blue")?,
                ],
            })
        })
        .collect()
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// A posed camera with its image name.
#[derive(Clone, Debug, PartialEq)]
pub struct PosedImage {
    pub name: String,
    pub camera: Camera,
}

/// Builds the camera of `pose` from its intrinsics.
pub fn posed_camera(pose: &ImagePose, intr: &Intrinsics) -> Result<Camera> {
    let rotation = rotation_from_quat(&pose.qvec)?;
    Camera::new(
        intr.fx,
        intr.fy,
        intr.cx,
        intr.cy,
        rotation,
        pose.tvec,
        intr.width,
        intr.height,
    )
}

/// Reads `cameras.txt` and `images.txt` from `dir`, ordered by image id.
pub fn read_model(dir: &Path) -> Result<Vec<PosedImage>> {
    let cam_path = dir.join("cameras.txt");
    let img_path = dir.join("images.txt");
    let cams = parse_cameras(&read_text(&cam_path)?, &cam_path)?;
    let mut poses = parse_images(&read_text(&img_path)?, &img_path)?;
    poses.sort_by_key(|p| p.id);
    poses
        .iter()
        .map(|p| {
            let intr = cams.get(&p.camera_id).ok_or_else(|| Error::Parse {
                path: img_path.clone(),
                line: 0,
                message: format!("image {} references unknown camera {}", p.name, p.camera_id),
            })?;
            Ok(PosedImage {
                name: p.name.clone(),
                camera: posed_camera(p, intr)?,
            })
        })
        .collect()
}

pub fn read_points(path: &Path) -> Result<Vec<Point3D>> {
    parse_points(&read_text(path)?, path)
}

/// `[qw, qx, qy, qz]` of a rotation matrix, with `qw ≥ 0`.
pub fn quat_from_rotation(r: &Mat3) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
    [q.w, q.i, q.j, q.k]
}

/// Writes one `PINHOLE` camera and one image entry per view.
pub fn write_model(dir: &Path, images: &[PosedImage]) -> Result<()> {
    let mut cams = String::from("# CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n");
    let mut imgs = String::from("# IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n# POINTS2D[] as (X, Y, POINT3D_ID)\n");
    for (i, im) in images.iter().enumerate() {
        let c = &im.camera;
        let id = i + 1;
        writeln!(cams, "{id} PINHOLE {} {} {} {} {} {}", c.width, c.height, c.fx, c.fy, c.cx, c.cy).unwrap();
        let [qw, qx, qy, qz] = quat_from_rotation(&c.rotation);
        let t = c.translation;
        writeln!(imgs, "{id} {qw} {qx} {qy} {qz} {} {} {} {id} {}\n", t.x, t.y, t.z, im.name).unwrap();
    }
    write_file(&dir.join("cameras.txt"), &cams)?;
    write_file(&dir.join("images.txt"), &imgs)
}

pub fn write_points(path: &Path, points: &[Point3D]) -> Result<()> {
    let mut s = String::from("# POINT3D_ID X Y Z R G B ERROR TRACK[]\n");
    for p in points {
        let [r, g, b] = p.color;
        writeln!(s, "{} {} {} {} {r} {g} {b} 0", p.id, p.position.x, p.position.y, p.position.z).unwrap();
    }
    write_file(path, &s)
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(PathBuf::from(path), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::random_quat;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p() -> &'static Path {
        Path::new("fixture.txt")
    }

    #[test]
    fn simple_pinhole_shares_focal() {
        let c = parse_cameras("# header\n1 SIMPLE_PINHOLE 100 100 100 50 50\n", p()).unwrap();
        let c = &c[&1];
        assert_eq!((c.fx, c.fy, c.cx, c.cy), (100.0, 100.0, 50.0, 50.0));
        assert_eq!(c.model, CameraModel::SimplePinhole);
    }

    #[test]
    fn identity_pose_is_identity_transform() {
        let imgs = parse_images("1 1 0 0 0 0 0 0 1 a.ppm\n\n", p()).unwrap();
        let cams = parse_cameras("1 PINHOLE 4 4 2 2 2 2\n", p()).unwrap();
        let cam = posed_camera(&imgs[0], &cams[&1]).unwrap();
        assert_eq!(cam.rotation, Mat3::identity());
        assert_eq!(cam.translation, Vec3::zeros());
    }

    #[test]
    fn unknown_model_is_named() {
        let e = parse_cameras("1 OPENCV 4 4 1 1 2 2 0 0 0 0\n", p()).unwrap_err();
        assert!(matches!(&e, Error::UnsupportedModel(m) if m == "OPENCV"), "{e}");
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let e = parse_cameras("# c\n\n1 PINHOLE 4 four 1 1 2 2\n", p()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
        let e = parse_cameras("1 PINHOLE 4 4 1 1 2\n", p()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e}");
        let e = parse_images("# x\n1 1 0 0 0 0 0 0 1 a.ppm\n\n2 1 0 0 0 0 0\n\n", p()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 4, .. }), "{e}");
        let e = parse_images("1 1 0 0 zero 0 0 0 1 a.ppm\n", p()).unwrap_err();
        assert!(e.to_string().contains("qz"), "{e}");
    }

    #[test]
    fn observation_lines_are_skipped() {
        let text = "1 1 0 0 0 0 0 1 1 a.ppm\n10.0 20.0 3 11.5 2.5 -1\n2 1 0 0 0 0 0 2 1 b.ppm\n\n";
        let imgs = parse_images(text, p()).unwrap();
        assert_eq!(imgs.len(), 2);
        assert_eq!(imgs[1].name, "b.ppm");
        assert_eq!(imgs[1].tvec, Vec3::new(0.0, 0.0, 2.0));
    }

    #[test]
    fn points_parse() {
        let pts = parse_points("# h\n7 0.5 -1 2 255 0 12 0.3 1 2\n", p()).unwrap();
        assert_eq!(pts[0].id, 7);
        assert_eq!(pts[0].position, Vec3::new(0.5, -1.0, 2.0));
        assert_eq!(pts[0].color, [255, 0, 12]);
    }

    proptest! {
        #[test]
        fn written_models_read_back(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_quat(&mut rng);
            let rotation = rotation_from_quat(&q).unwrap();
            let cam = Camera::new(31.5, 30.25, 8.0, 7.5, rotation, Vec3::new(0.1, -0.2, 2.5), 16, 15).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let images = vec![PosedImage { name: "v.ppm".into(), camera: cam.clone() }];
            write_model(dir.path(), &images).unwrap();
            let back = read_model(dir.path()).unwrap();
            prop_assert_eq!(&back[0].name, "v.ppm");
            let c = &back[0].camera;
            prop_assert_eq!((c.fx, c.fy, c.cx, c.cy, c.width, c.height), (31.5, 30.25, 8.0, 7.5, 16, 15));
            prop_assert!((c.rotation - cam.rotation).abs().max() < 1e-12);
            prop_assert_eq!(c.translation, cam.translation);
        }
    }
}
