//! COLMAP text models: `cameras.txt`, `images.txt`, `points3D.txt`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use gsdepth_core::dataset::{Dataset, View};
use gsdepth_core::scene::{normalize_quaternion, quaternion_from_rotation, rotation_from_quaternion, Camera, Observation, SparsePoint};
use nalgebra::{Vector2, Vector3};

use crate::error::{self, Error, Result};
use crate::png;

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapCamera {
    pub id: u32,
    pub width: usize,
    pub height: usize,
    /// `[fx, fy, cx, cy]`; SIMPLE_PINHOLE shares one focal length.
    pub params: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapImage {
    pub id: u32,
    /// World-to-camera rotation `(w, x, y, z)`.
    pub qvec: [f64; 4],
    pub tvec: [f64; 3],
    pub camera_id: u32,
    pub name: String,
    /// `(x, y, point3D_id)`, with -1 for unmatched features.
    pub points2d: Vec<(f64, f64, i64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapPoint {
    pub id: u64,
    pub xyz: [f64; 3],
    pub rgb: [u8; 3],
    pub error: f64,
    /// `(image_id, point2D_idx)`.
    pub track: Vec<(u32, usize)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ColmapModel {
    pub cameras: Vec<ColmapCamera>,
    pub images: Vec<ColmapImage>,
    pub points: Vec<ColmapPoint>,
}

/// Non-comment lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.starts_with('#'))
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, tok: Option<&str>, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::parse(path, line, format!("missing {what}")))?;
    tok.parse().map_err(|_| Error::parse(path, line, format!("bad {what} {tok:?}")))
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(error::read(path)?).map_err(|_| Error::format(path, "not UTF-8"))
}

fn parse_cameras(path: &Path, text: &str) -> Result<Vec<ColmapCamera>> {
    let mut out = Vec::new();
    for (n, line) in content_lines(text).filter(|(_, l)| !l.is_empty()) {
        let mut tok = line.split_whitespace();
        let id = field(path, n, tok.next(), "camera id")?;
        let model: String = field(path, n, tok.next(), "camera model")?;
        let width = field(path, n, tok.next(), "width")?;
        let height = field(path, n, tok.next(), "height")?;
        let params: Vec<f64> = tok.map(|t| field(path, n, Some(t), "camera parameter")).collect::<Result<_>>()?;
        let params = match (model.as_str(), params.as_slice()) {
            ("PINHOLE", [fx, fy, cx, cy]) => [*fx, *fy, *cx, *cy],
            ("SIMPLE_PINHOLE", [f, cx, cy]) => [*f, *f, *cx, *cy],
            ("PINHOLE" | "SIMPLE_PINHOLE", p) => {
                return Err(Error::parse(path, n, format!("{model} with {} parameters", p.len())))
            }
            _ => return Err(Error::UnsupportedModel { path: path.to_path_buf(), model }),
        };
        out.push(ColmapCamera { id, width, height, params });
    }
    Ok(out)
}

fn parse_images(path: &Path, text: &str) -> Result<Vec<ColmapImage>> {
    let mut out = Vec::new();
    let mut lines = content_lines(text);
    while let Some((n, line)) = lines.next() {
        if line.is_empty() {
            continue;
        }
        let mut tok = line.split_whitespace();
        let id = field(path, n, tok.next(), "image id")?;
        let mut q = [0.0; 4];
        for (k, v) in q.iter_mut().enumerate() {
            *v = field(path, n, tok.next(), &format!("q{k}"))?;
        }
        let mut t = [0.0; 3];
        for (k, v) in t.iter_mut().enumerate() {
            *v = field(path, n, tok.next(), &format!("t{k}"))?;
        }
        let camera_id = field(path, n, tok.next(), "camera id")?;
        let name: String = field(path, n, tok.next(), "image name")?;
        if let Some(extra) = tok.next() {
            return Err(Error::parse(path, n, format!("unexpected token {extra:?}")));
        }
        // The feature line follows the pose line and may be empty.
        let mut points2d = Vec::new();
        if let Some((m, feats)) = lines.next() {
            let tok: Vec<&str> = feats.split_whitespace().collect();
            if tok.len() % 3 != 0 {
                return Err(Error::parse(path, m, "feature line is not a list of (x, y, id) triples"));
            }
            for c in tok.chunks_exact(3) {
                points2d.push((
                    field(path, m, Some(c[0]), "feature x")?,
                    field(path, m, Some(c[1]), "feature y")?,
                    field(path, m, Some(c[2]), "point id")?,
                ));
            }
        }
        out.push(ColmapImage { id, qvec: q, tvec: t, camera_id, name, points2d });
    }
    Ok(out)
}

fn parse_points(path: &Path, text: &str) -> Result<Vec<ColmapPoint>> {
    let mut out = Vec::new();
    for (n, line) in content_lines(text).filter(|(_, l)| !l.is_empty()) {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 8 || (tok.len() - 8) % 2 != 0 {
            return Err(Error::parse(path, n, "expected id, xyz, rgb, error and (image, feature) pairs"));
        }
        let xyz = [
            field(path, n, Some(tok[1]), "x")?,
            field(path, n, Some(tok[2]), "y")?,
            field(path, n, Some(tok[3]), "z")?,
        ];
        let rgb = [
            field(path, n, Some(tok[4]), "red")?,
            field(path, n, Some(tok[5]), "green")?,
            field(path, n, Some(tok[6]), "blue")?,
        ];
        let track = tok[8..]
            .chunks_exact(2)
            .map(|c| Ok((field(path, n, Some(c[0]), "track image id")?, field(path, n, Some(c[1]), "track feature index")?)))
            .collect::<Result<_>>()?;
        out.push(ColmapPoint { id: field(path, n, Some(tok[0]), "point id")?, xyz, rgb, error: field(path, n, Some(tok[7]), "error")?, track });
    }
    Ok(out)
}

/// Reads the three text files of a model directory.
pub fn read_model(dir: &Path) -> Result<ColmapModel> {
    let p = dir.join("cameras.txt");
    let cameras = parse_cameras(&p, &read_text(&p)?)?;
    let p = dir.join("images.txt");
    let images = parse_images(&p, &read_text(&p)?)?;
    let p = dir.join("points3D.txt");
    let points = parse_points(&p, &read_text(&p)?)?;
    Ok(ColmapModel { cameras, images, points })
}

impl ColmapModel {
    pub fn camera(&self, image: &ColmapImage) -> Result<Camera> {
        let c = self
            .cameras
            .iter()
            .find(|c| c.id == image.camera_id)
            .ok_or_else(|| Error::Mismatch(format!("image {} references unknown camera {}", image.id, image.camera_id)))?;
        let [fx, fy, cx, cy] = c.params;
        let r = rotation_from_quaternion(normalize_quaternion(image.qvec));
        Ok(Camera::new(fx, fy, cx, cy, c.width, c.height, r, Vector3::from(image.tvec))?)
    }

    /// Tracks become observations at the referenced feature positions.
    pub fn sparse_points(&self) -> Result<Vec<SparsePoint>> {
        let by_id: BTreeMap<u32, &ColmapImage> = self.images.iter().map(|i| (i.id, i)).collect();
        self.points
            .iter()
            .map(|p| {
                let observations = p
                    .track
                    .iter()
                    .map(|(img, idx)| {
                        let image = by_id.get(img).ok_or(gsdepth_core::Error::UnknownView(*img))?;
                        let (x, y, _) = image.points2d.get(*idx).ok_or_else(|| {
                            Error::Mismatch(format!("point {} references feature {idx} of image {img}, which has {}", p.id, image.points2d.len()))
                        })?;
                        Ok(Observation { view: *img, pixel: Vector2::new(*x, *y) })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let color = Some(p.rgb.map(|c| c as f64 / 255.0));
                Ok(SparsePoint { position: Vector3::from(p.xyz), observations, color })
            })
            .collect()
    }

    /// One PINHOLE camera per view, with feature lists rebuilt from the
    /// point observations.
    pub fn from_dataset(dataset: &Dataset) -> Self {
        let mut model = ColmapModel::default();
        let mut index: BTreeMap<u32, usize> = BTreeMap::new();
        for (i, v) in dataset.views.iter().enumerate() {
            let c = &v.camera;
            model.cameras.push(ColmapCamera { id: v.id, width: c.width, height: c.height, params: [c.fx, c.fy, c.cx, c.cy] });
            let t = c.translation;
            model.images.push(ColmapImage {
                id: v.id,
                qvec: quaternion_from_rotation(&c.rotation),
                tvec: [t.x, t.y, t.z],
                camera_id: v.id,
                name: v.name.clone(),
                points2d: Vec::new(),
            });
            index.insert(v.id, i);
        }
        for (pid, p) in dataset.points.iter().enumerate() {
            let mut track = Vec::new();
            for o in &p.observations {
                let image = &mut model.images[index[&o.view]];
                track.push((o.view, image.points2d.len()));
                image.points2d.push((o.pixel.x, o.pixel.y, pid as i64 + 1));
            }
            let rgb = p.color.unwrap_or([0.5; 3]).map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8);
            let x = p.position;
            model.points.push(ColmapPoint { id: pid as u64 + 1, xyz: [x.x, x.y, x.z], rgb, error: 0.0, track });
        }
        model
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        // `{}` prints the shortest representation that parses back exactly.
        let mut s = String::from("# CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n");
        for c in &self.cameras {
            let [fx, fy, cx, cy] = c.params;
            writeln!(s, "{} PINHOLE {} {} {fx} {fy} {cx} {cy}", c.id, c.width, c.height).unwrap();
        }
        error::write(&dir.join("cameras.txt"), s.as_bytes())?;

        let mut s = String::from("# IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n# POINTS2D[] as (X, Y, POINT3D_ID)\n");
        for i in &self.images {
            let [qw, qx, qy, qz] = i.qvec;
            let [tx, ty, tz] = i.tvec;
            writeln!(s, "{} {qw} {qx} {qy} {qz} {tx} {ty} {tz} {} {}", i.id, i.camera_id, i.name).unwrap();
            let feats: Vec<String> = i.points2d.iter().map(|(x, y, id)| format!("{x} {y} {id}")).collect();
            writeln!(s, "{}", feats.join(" ")).unwrap();
        }
        error::write(&dir.join("images.txt"), s.as_bytes())?;

        let mut s = String::from("# POINT3D_ID X Y Z R G B ERROR TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
        for p in &self.points {
            let [x, y, z] = p.xyz;
            let [r, g, b] = p.rgb;
            write!(s, "{} {x} {y} {z} {r} {g} {b} {}", p.id, p.error).unwrap();
            for (img, idx) in &p.track {
                write!(s, " {img} {idx}").unwrap();
            }
            s.push('\n');
        }
        error::write(&dir.join("points3D.txt"), s.as_bytes())
    }
}

/// Loads a model directory with its images under `images/`, in file order.
pub fn load_colmap_text(dir: &Path) -> Result<Dataset> {
    let model = read_model(dir)?;
    let mut views = Vec::with_capacity(model.images.len());
    for img in &model.images {
        let camera = model.camera(img)?;
        let image = png::read_png(&dir.join("images").join(&img.name))?;
        views.push(View { id: img.id, name: img.name.clone(), camera, image, gt_depth: None, holdout: false });
    }
    Ok(Dataset::new(views, model.sparse_points()?)?)
}
