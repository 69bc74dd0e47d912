use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use super::{
    check_track_element, validate_image_fields, validate_point_fields, CameraModel, ColmapError,
    ImageRecord, Location, Observation, PinholeCamera, Point3D, SparseScene, TrackElement,
};
use crate::so3::{Translation3, UnitQuaternion};

/// Lines of a text file, 1-based, with comments and blank lines skipped
/// unless a raw line is requested.
struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate(),
        }
    }

    fn next_record(&mut self) -> Option<(usize, &'a str)> {
        for (i, line) in self.inner.by_ref() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            return Some((i + 1, line));
        }
        None
    }

    fn next_raw(&mut self) -> Option<(usize, &'a str)> {
        self.inner.next().map(|(i, l)| (i + 1, l))
    }
}

fn malformed(file: &'static str, line: usize, detail: impl Into<String>) -> ColmapError {
    ColmapError::Malformed {
        file: file.into(),
        location: Location::Line(line),
        detail: detail.into(),
    }
}

fn parse<T: FromStr>(file: &'static str, line: usize, tok: Option<&str>, what: &str) -> Result<T, ColmapError> {
    let tok = tok.ok_or_else(|| malformed(file, line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| malformed(file, line, format!("cannot parse {what} from {tok:?}")))
}

fn decode_cameras(text: &str) -> Result<BTreeMap<u32, PinholeCamera>, ColmapError> {
    const FILE: &str = "cameras.txt";
    let mut lines = Lines::new(text);
    let mut cameras = BTreeMap::new();
    while let Some((ln, line)) = lines.next_record() {
        let mut toks = line.split_whitespace();
        let camera_id: u32 = parse(FILE, ln, toks.next(), "CAMERA_ID")?;
        let model_name = toks.next().ok_or_else(|| malformed(FILE, ln, "missing MODEL"))?;
        let model = CameraModel::from_name(model_name).ok_or_else(|| ColmapError::UnknownCameraModel {
            file: FILE.into(),
            location: Location::Line(ln),
            model: model_name.into(),
        })?;
        let width: u64 = parse(FILE, ln, toks.next(), "WIDTH")?;
        let height: u64 = parse(FILE, ln, toks.next(), "HEIGHT")?;
        let params = toks
            .map(|t| parse::<f64>(FILE, ln, Some(t), "PARAMS"))
            .collect::<Result<Vec<_>, _>>()?;
        let cam = PinholeCamera {
            camera_id,
            model,
            width,
            height,
            params,
        };
        cam.validate().map_err(|detail| ColmapError::Invalid {
            file: FILE.into(),
            location: Location::Line(ln),
            detail,
        })?;
        match cameras.entry(camera_id) {
            Entry::Occupied(_) => {
                return Err(ColmapError::DuplicateId {
                    file: FILE.into(),
                    location: Location::Line(ln),
                    kind: "camera",
                    id: camera_id as u64,
                })
            }
            Entry::Vacant(v) => {
                v.insert(cam);
            }
        }
    }
    Ok(cameras)
}

/// Splits off the first `n` whitespace-separated tokens and returns them with
/// the trimmed remainder (the image name, which may contain spaces).
fn split_n(line: &str, n: usize) -> (Vec<&str>, &str) {
    let mut toks = Vec::with_capacity(n);
    let mut rest = line.trim_start();
    while toks.len() < n {
        let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
        if end == 0 {
            break;
        }
        toks.push(&rest[..end]);
        rest = rest[end..].trim_start();
    }
    (toks, rest.trim_end())
}

fn decode_images(
    text: &str,
    cameras: &BTreeMap<u32, PinholeCamera>,
) -> Result<(BTreeMap<u32, ImageRecord>, BTreeMap<u32, usize>), ColmapError> {
    const FILE: &str = "images.txt";
    let mut lines = Lines::new(text);
    let mut images = BTreeMap::new();
    let mut point_lines = BTreeMap::new();
    while let Some((ln, line)) = lines.next_record() {
        let (toks, name) = split_n(line, 9);
        let mut it = toks.iter().copied();
        let image_id: u32 = parse(FILE, ln, it.next(), "IMAGE_ID")?;
        let mut q = [0.0; 4];
        for (k, v) in q.iter_mut().enumerate() {
            *v = parse(FILE, ln, it.next(), ["QW", "QX", "QY", "QZ"][k])?;
        }
        let mut t = [0.0; 3];
        for (k, v) in t.iter_mut().enumerate() {
            *v = parse(FILE, ln, it.next(), ["TX", "TY", "TZ"][k])?;
        }
        let camera_id: u32 = parse(FILE, ln, it.next(), "CAMERA_ID")?;
        if name.is_empty() {
            return Err(malformed(FILE, ln, "missing NAME"));
        }
        // the POINTS2D line follows directly and may be empty
        let (pln, pline) = lines.next_raw().unwrap_or((ln + 1, ""));
        let toks: Vec<&str> = pline.split_whitespace().collect();
        if toks.len() % 3 != 0 {
            return Err(malformed(FILE, pln, "POINTS2D is not a list of (X, Y, POINT3D_ID) triples"));
        }
        let mut observations = Vec::with_capacity(toks.len() / 3);
        for tri in toks.chunks(3) {
            let x: f64 = parse(FILE, pln, Some(tri[0]), "X")?;
            let y: f64 = parse(FILE, pln, Some(tri[1]), "Y")?;
            let pid: i64 = parse(FILE, pln, Some(tri[2]), "POINT3D_ID")?;
            let point3d_id = match pid {
                -1 => None,
                p if p >= 0 => Some(p as u64),
                p => return Err(malformed(FILE, pln, format!("negative POINT3D_ID {p}"))),
            };
            observations.push(Observation { xy: [x, y], point3d_id });
        }
        let img = ImageRecord {
            image_id,
            name: name.to_string(),
            camera_id,
            qvec: UnitQuaternion::from_array(q),
            tvec: Translation3::from(t),
            observations,
        };
        validate_image_fields(&img).map_err(|detail| ColmapError::Invalid {
            file: FILE.into(),
            location: Location::Line(ln),
            detail,
        })?;
        if !cameras.contains_key(&camera_id) {
            return Err(ColmapError::DanglingReference {
                file: FILE.into(),
                location: Location::Line(ln),
                detail: format!("image {image_id} references missing camera {camera_id}"),
            });
        }
        match images.entry(image_id) {
            Entry::Occupied(_) => {
                return Err(ColmapError::DuplicateId {
                    file: FILE.into(),
                    location: Location::Line(ln),
                    kind: "image",
                    id: image_id as u64,
                })
            }
            Entry::Vacant(v) => {
                v.insert(img);
            }
        }
        point_lines.insert(image_id, pln);
    }
    Ok((images, point_lines))
}

fn decode_points(text: &str, images: &BTreeMap<u32, ImageRecord>) -> Result<BTreeMap<u64, Point3D>, ColmapError> {
    const FILE: &str = "points3D.txt";
    let mut lines = Lines::new(text);
    let mut points = BTreeMap::new();
    while let Some((ln, line)) = lines.next_record() {
        let mut toks = line.split_whitespace();
        let id: u64 = parse(FILE, ln, toks.next(), "POINT3D_ID")?;
        let xyz = [
            parse(FILE, ln, toks.next(), "X")?,
            parse(FILE, ln, toks.next(), "Y")?,
            parse(FILE, ln, toks.next(), "Z")?,
        ];
        let rgb = [
            parse(FILE, ln, toks.next(), "R")?,
            parse(FILE, ln, toks.next(), "G")?,
            parse(FILE, ln, toks.next(), "B")?,
        ];
        let error: f64 = parse(FILE, ln, toks.next(), "ERROR")?;
        let rest: Vec<&str> = toks.collect();
        if rest.len() % 2 != 0 {
            return Err(malformed(FILE, ln, "TRACK is not a list of (IMAGE_ID, POINT2D_IDX) pairs"));
        }
        let mut track = Vec::with_capacity(rest.len() / 2);
        for pair in rest.chunks(2) {
            let el = TrackElement {
                image_id: parse(FILE, ln, Some(pair[0]), "IMAGE_ID")?,
                point2d_idx: parse(FILE, ln, Some(pair[1]), "POINT2D_IDX")?,
            };
            check_track_element(images, id, &el).map_err(|detail| ColmapError::DanglingReference {
                file: FILE.into(),
                location: Location::Line(ln),
                detail,
            })?;
            track.push(el);
        }
        let p = Point3D { xyz, rgb, error, track };
        validate_point_fields(&p).map_err(|detail| ColmapError::Invalid {
            file: FILE.into(),
            location: Location::Line(ln),
            detail,
        })?;
        if id == u64::MAX {
            return Err(ColmapError::Invalid {
                file: FILE.into(),
                location: Location::Line(ln),
                detail: "reserved point id".into(),
            });
        }
        match points.entry(id) {
            Entry::Occupied(_) => {
                return Err(ColmapError::DuplicateId {
                    file: FILE.into(),
                    location: Location::Line(ln),
                    kind: "point3D",
                    id,
                })
            }
            Entry::Vacant(v) => {
                v.insert(p);
            }
        }
    }
    Ok(points)
}

pub fn decode_text_model(cameras: &str, images: &str, points: &str) -> Result<SparseScene, ColmapError> {
    let cameras = decode_cameras(cameras)?;
    let (images, point_lines) = decode_images(images, &cameras)?;
    let points3d = decode_points(points, &images)?;
    for img in images.values() {
        for obs in &img.observations {
            if let Some(pid) = obs.point3d_id {
                if !points3d.contains_key(&pid) {
                    return Err(ColmapError::DanglingReference {
                        file: "images.txt".into(),
                        location: Location::Line(point_lines[&img.image_id]),
                        detail: format!("image {} observes missing point {pid}", img.image_id),
                    });
                }
            }
        }
    }
    Ok(SparseScene {
        cameras,
        images,
        points3d,
        scale_to_meters: None,
    })
}

/// Encodes `[cameras.txt, images.txt, points3D.txt]`. Floats use the shortest
/// representation that parses back to the same bits.
pub fn encode_text_model(scene: &SparseScene) -> [String; 3] {
    let mut cams = String::new();
    cams.push_str("# Camera list with one line of data per camera:\n");
    cams.push_str("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    let _ = writeln!(cams, "# Number of cameras: {}", scene.cameras.len());
    for cam in scene.cameras.values() {
        let _ = write!(cams, "{} {} {} {}", cam.camera_id, cam.model.name(), cam.width, cam.height);
        for p in &cam.params {
            let _ = write!(cams, " {p}");
        }
        cams.push('\n');
    }

    let n_obs: usize = scene.images.values().map(|i| i.num_registered_observations()).sum();
    let mean_obs = if scene.images.is_empty() {
        0.0
    } else {
        n_obs as f64 / scene.images.len() as f64
    };
    let mut imgs = String::new();
    imgs.push_str("# Image list with two lines of data per image:\n");
    imgs.push_str("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n");
    imgs.push_str("#   POINTS2D[] as (X, Y, POINT3D_ID)\n");
    let _ = writeln!(
        imgs,
        "# Number of images: {}, mean observations per image: {}",
        scene.images.len(),
        mean_obs
    );
    for img in scene.images.values() {
        let q = img.qvec;
        let t = img.tvec.0;
        let _ = writeln!(
            imgs,
            "{} {} {} {} {} {} {} {} {} {}",
            img.image_id, q.w, q.x, q.y, q.z, t.x, t.y, t.z, img.camera_id, img.name
        );
        let mut first = true;
        for obs in &img.observations {
            if !first {
                imgs.push(' ');
            }
            first = false;
            match obs.point3d_id {
                Some(pid) => {
                    let _ = write!(imgs, "{} {} {}", obs.xy[0], obs.xy[1], pid);
                }
                None => {
                    let _ = write!(imgs, "{} {} -1", obs.xy[0], obs.xy[1]);
                }
            }
        }
        imgs.push('\n');
    }

    let track_total: usize = scene.points3d.values().map(|p| p.track.len()).sum();
    let mean_track = if scene.points3d.is_empty() {
        0.0
    } else {
        track_total as f64 / scene.points3d.len() as f64
    };
    let mut pts = String::new();
    pts.push_str("# 3D point list with one line of data per point:\n");
    pts.push_str("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
    let _ = writeln!(
        pts,
        "# Number of points: {}, mean track length: {}",
        scene.points3d.len(),
        mean_track
    );
    for (id, p) in &scene.points3d {
        let _ = write!(
            pts,
            "{} {} {} {} {} {} {} {}",
            id, p.xyz[0], p.xyz[1], p.xyz[2], p.rgb[0], p.rgb[1], p.rgb[2], p.error
        );
        for el in &p.track {
            let _ = write!(pts, " {} {}", el.image_id, el.point2d_idx);
        }
        pts.push('\n');
    }
    [cams, imgs, pts]
}
