use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use super::{
    check_track_element, validate_image_fields, validate_point_fields, CameraModel, ColmapError,
    ImageRecord, Location, Observation, PinholeCamera, Point3D, SparseScene, TrackElement,
};
use crate::so3::{Translation3, UnitQuaternion};

const INVALID_POINT3D_ID: u64 = u64::MAX;

struct Reader<'a> {
    file: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(file: &'static str, buf: &'a [u8]) -> Self {
        Self { file, buf, pos: 0 }
    }

    fn offset(&self) -> Location {
        Location::Byte(self.pos as u64)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ColmapError> {
        if self.remaining() < n {
            return Err(ColmapError::Truncated {
                file: self.file.into(),
                location: self.offset(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ColmapError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ColmapError> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    fn i32(&mut self) -> Result<i32, ColmapError> {
        Ok(LittleEndian::read_i32(self.take(4)?))
    }

    fn u64(&mut self) -> Result<u64, ColmapError> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }

    fn f64(&mut self) -> Result<f64, ColmapError> {
        Ok(LittleEndian::read_f64(self.take(8)?))
    }

    fn cstr(&mut self) -> Result<String, ColmapError> {
        let start = self.pos;
        let len = self.buf[start..].iter().position(|&b| b == 0).ok_or(ColmapError::Truncated {
            file: self.file.into(),
            location: Location::Byte(self.buf.len() as u64),
        })?;
        let bytes = self.take(len)?;
        self.pos += 1;
        String::from_utf8(bytes.to_vec()).map_err(|_| ColmapError::Malformed {
            file: self.file.into(),
            location: Location::Byte(start as u64),
            detail: "image name is not valid UTF-8".into(),
        })
    }

    /// Reads a count and bounds it by the bytes left, so hostile counts
    /// cannot trigger huge allocations.
    fn count(&mut self, min_record: usize) -> Result<usize, ColmapError> {
        let at = self.offset();
        let n = self.u64()?;
        if n > (self.remaining() / min_record.max(1)) as u64 {
            return Err(ColmapError::Truncated {
                file: self.file.into(),
                location: at,
            });
        }
        Ok(n as usize)
    }

    fn finish(&self) -> Result<(), ColmapError> {
        if self.remaining() != 0 {
            return Err(ColmapError::Malformed {
                file: self.file.into(),
                location: self.offset(),
                detail: format!("{} trailing bytes", self.remaining()),
            });
        }
        Ok(())
    }
}

fn invalid(file: &'static str, location: Location, detail: String) -> ColmapError {
    ColmapError::Invalid {
        file: file.into(),
        location,
        detail,
    }
}

fn decode_cameras(buf: &[u8]) -> Result<BTreeMap<u32, PinholeCamera>, ColmapError> {
    const FILE: &str = "cameras.bin";
    let mut r = Reader::new(FILE, buf);
    // id, model, width, height and at least three params
    let n = r.count(4 + 4 + 8 + 8 + 3 * 8)?;
    let mut cameras = BTreeMap::new();
    for _ in 0..n {
        let at = r.offset();
        let camera_id = r.u32()?;
        let model_at = r.offset();
        let model_id = r.i32()?;
        let model = CameraModel::from_id(model_id).ok_or_else(|| ColmapError::UnknownCameraModel {
            file: FILE.into(),
            location: model_at,
            model: model_id.to_string(),
        })?;
        let width = r.u64()?;
        let height = r.u64()?;
        let params = (0..model.num_params()).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let cam = PinholeCamera {
            camera_id,
            model,
            width,
            height,
            params,
        };
        cam.validate().map_err(|d| invalid(FILE, at, d))?;
        match cameras.entry(camera_id) {
            Entry::Occupied(_) => {
                return Err(ColmapError::DuplicateId {
                    file: FILE.into(),
                    location: at,
                    kind: "camera",
                    id: camera_id as u64,
                })
            }
            Entry::Vacant(v) => {
                v.insert(cam);
            }
        }
    }
    r.finish()?;
    Ok(cameras)
}

/// Byte offset of each image's first observation, for error locations.
type ObsOffsets = BTreeMap<u32, u64>;

fn decode_images(
    buf: &[u8],
    cameras: &BTreeMap<u32, PinholeCamera>,
) -> Result<(BTreeMap<u32, ImageRecord>, ObsOffsets), ColmapError> {
    const FILE: &str = "images.bin";
    let mut r = Reader::new(FILE, buf);
    let n = r.count(4 + 7 * 8 + 4 + 1 + 8)?;
    let mut images = BTreeMap::new();
    let mut offsets = ObsOffsets::new();
    for _ in 0..n {
        let at = r.offset();
        let image_id = r.u32()?;
        let q = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
        let t = [r.f64()?, r.f64()?, r.f64()?];
        let camera_id = r.u32()?;
        let name = r.cstr()?;
        let n_obs = r.count(24)?;
        let obs_at = r.pos as u64;
        let mut observations = Vec::with_capacity(n_obs);
        for _ in 0..n_obs {
            let x = r.f64()?;
            let y = r.f64()?;
            let pid = r.u64()?;
            observations.push(Observation {
                xy: [x, y],
                point3d_id: (pid != INVALID_POINT3D_ID).then_some(pid),
            });
        }
        let img = ImageRecord {
            image_id,
            name,
            camera_id,
            qvec: UnitQuaternion::from_array(q),
            tvec: Translation3::from(t),
            observations,
        };
        validate_image_fields(&img).map_err(|d| invalid(FILE, at, d))?;
        if !cameras.contains_key(&camera_id) {
            return Err(ColmapError::DanglingReference {
                file: FILE.into(),
                location: at,
                detail: format!("image {image_id} references missing camera {camera_id}"),
            });
        }
        match images.entry(image_id) {
            Entry::Occupied(_) => {
                return Err(ColmapError::DuplicateId {
                    file: FILE.into(),
                    location: at,
                    kind: "image",
                    id: image_id as u64,
                })
            }
            Entry::Vacant(v) => {
                v.insert(img);
            }
        }
        offsets.insert(image_id, obs_at);
    }
    r.finish()?;
    Ok((images, offsets))
}

fn decode_points(buf: &[u8], images: &BTreeMap<u32, ImageRecord>) -> Result<BTreeMap<u64, Point3D>, ColmapError> {
    const FILE: &str = "points3D.bin";
    let mut r = Reader::new(FILE, buf);
    let n = r.count(8 + 24 + 3 + 8 + 8)?;
    let mut points = BTreeMap::new();
    for _ in 0..n {
        let at = r.offset();
        let id = r.u64()?;
        let xyz = [r.f64()?, r.f64()?, r.f64()?];
        let rgb = [r.u8()?, r.u8()?, r.u8()?];
        let error = r.f64()?;
        let track_len = r.count(8)?;
        let mut track = Vec::with_capacity(track_len);
        for _ in 0..track_len {
            let el_at = r.offset();
            let el = TrackElement {
                image_id: r.u32()?,
                point2d_idx: r.u32()?,
            };
            check_track_element(images, id, &el).map_err(|detail| ColmapError::DanglingReference {
                file: FILE.into(),
                location: el_at,
                detail,
            })?;
            track.push(el);
        }
        let p = Point3D { xyz, rgb, error, track };
        validate_point_fields(&p).map_err(|d| invalid(FILE, at, d))?;
        if id == INVALID_POINT3D_ID {
            return Err(invalid(FILE, at, "reserved point id".into()));
        }
        match points.entry(id) {
            Entry::Occupied(_) => {
                return Err(ColmapError::DuplicateId {
                    file: FILE.into(),
                    location: at,
                    kind: "point3D",
                    id,
                })
            }
            Entry::Vacant(v) => {
                v.insert(p);
            }
        }
    }
    r.finish()?;
    Ok(points)
}

/// Parses the three binary model files held in memory.
pub fn decode_binary_model(cameras: &[u8], images: &[u8], points: &[u8]) -> Result<SparseScene, ColmapError> {
    let cameras = decode_cameras(cameras)?;
    let (images, obs_offsets) = decode_images(images, &cameras)?;
    let points3d = decode_points(points, &images)?;
    for img in images.values() {
        for (k, obs) in img.observations.iter().enumerate() {
            if let Some(pid) = obs.point3d_id {
                if !points3d.contains_key(&pid) {
                    return Err(ColmapError::DanglingReference {
                        file: "images.bin".into(),
                        location: Location::Byte(obs_offsets[&img.image_id] + 24 * k as u64),
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

/// Encodes a scene into `[cameras.bin, images.bin, points3D.bin]` bytes.
/// Records are written in ascending id order, so output is deterministic.
pub fn encode_binary_model(scene: &SparseScene) -> [Vec<u8>; 3] {
    // writes into a Vec<u8> cannot fail
    let mut cams = Vec::new();
    cams.write_u64::<LittleEndian>(scene.cameras.len() as u64).unwrap();
    for cam in scene.cameras.values() {
        cams.write_u32::<LittleEndian>(cam.camera_id).unwrap();
        cams.write_i32::<LittleEndian>(cam.model.id()).unwrap();
        cams.write_u64::<LittleEndian>(cam.width).unwrap();
        cams.write_u64::<LittleEndian>(cam.height).unwrap();
        for p in &cam.params {
            cams.write_f64::<LittleEndian>(*p).unwrap();
        }
    }

    let mut imgs = Vec::new();
    imgs.write_u64::<LittleEndian>(scene.images.len() as u64).unwrap();
    for img in scene.images.values() {
        imgs.write_u32::<LittleEndian>(img.image_id).unwrap();
        for v in img.qvec.to_array() {
            imgs.write_f64::<LittleEndian>(v).unwrap();
        }
        for v in <[f64; 3]>::from(img.tvec) {
            imgs.write_f64::<LittleEndian>(v).unwrap();
        }
        imgs.write_u32::<LittleEndian>(img.camera_id).unwrap();
        imgs.extend_from_slice(img.name.as_bytes());
        imgs.push(0);
        imgs.write_u64::<LittleEndian>(img.observations.len() as u64).unwrap();
        for obs in &img.observations {
            imgs.write_f64::<LittleEndian>(obs.xy[0]).unwrap();
            imgs.write_f64::<LittleEndian>(obs.xy[1]).unwrap();
            imgs.write_u64::<LittleEndian>(obs.point3d_id.unwrap_or(INVALID_POINT3D_ID))
                .unwrap();
        }
    }

    let mut pts = Vec::new();
    pts.write_u64::<LittleEndian>(scene.points3d.len() as u64).unwrap();
    for (id, p) in &scene.points3d {
        pts.write_u64::<LittleEndian>(*id).unwrap();
        for v in p.xyz {
            pts.write_f64::<LittleEndian>(v).unwrap();
        }
        pts.extend_from_slice(&p.rgb);
        pts.write_f64::<LittleEndian>(p.error).unwrap();
        pts.write_u64::<LittleEndian>(p.track.len() as u64).unwrap();
        for el in &p.track {
            pts.write_u32::<LittleEndian>(el.image_id).unwrap();
            pts.write_u32::<LittleEndian>(el.point2d_idx).unwrap();
        }
    }
    [cams, imgs, pts]
}
