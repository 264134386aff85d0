//! Versioned little-endian checkpoint of a [`NeuralScene`].
//!
//! ```text
//! magic        8 bytes  "SPLTCKPT"
//! version      u32
//! iteration    u64
//! active       u32      feature levels in use
//! config       u32 length + UTF-8 JSON of the model config
//! scale_floor  f64
//! bounds       aabb_min 3×f64, aabb_max 3×f64, centroid 3×f64, sigma f64
//! anchors      u32 count, then count × 3 f64 positions
//! levels       u32 count; per level:
//!                plane resolution u32, grid resolution u32,
//!                u32 vertex count + vertex anchors u32 (u32::MAX = empty)
//! tensors      u32 count; per tensor:
//!                u32 name length + UTF-8 name, group u8, per-anchor u8,
//!                u32 rank + rank × u32 dims, product(dims) × f64
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, NeuralScene};
use crate::params::{ParamGroup, ParamStore};
use crate::scene::{SceneBounds, Vec3};

pub const MAGIC: &[u8; 8] = b"SPLTCKPT";
pub const VERSION: u32 = 1;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&u32::try_from(v).expect("fits u32").to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn vec3(&mut self, v: &Vec3) {
        v.iter().for_each(|&x| self.f64(x));
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn vec3(&mut self) -> Result<Vec3> {
        Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn encode(scene: &NeuralScene, iteration: u64) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    w.u64(iteration);
    w.u32(scene.active_levels);
    w.bytes(serde_json::to_string(&scene.config).expect("config serializes").as_bytes());
    w.f64(scene.scale_floor);
    let b = &scene.bounds;
    w.vec3(&b.aabb_min);
    w.vec3(&b.aabb_max);
    w.vec3(&b.centroid);
    w.f64(b.spatial_sigma);
    w.u32(scene.positions.len());
    scene.positions.iter().for_each(|p| w.vec3(p));
    w.u32(scene.cscm.levels.len());
    for level in &scene.cscm.levels {
        w.u32(level.resolution);
        w.u32(level.grid.resolution);
        w.u32(level.grid.vertex_anchor.len());
        level.grid.vertex_anchor.iter().for_each(|&a| w.u32(a as usize));
    }
    let tensors = scene.store.tensors();
    w.u32(tensors.len());
    for t in tensors {
        w.bytes(t.name.as_bytes());
        w.u8(t.group.code());
        w.u8(t.per_anchor as u8);
        w.u32(t.shape.len());
        t.shape.iter().for_each(|&d| w.u32(d));
        t.data.iter().for_each(|&v| w.f64(v));
    }
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<(NeuralScene, u64)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let iteration = r.u64()?;
    let active = r.u32()?;
    let config: ModelConfig =
        serde_json::from_str(&r.string()?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let scale_floor = r.f64()?;
    let bounds = SceneBounds {
        aabb_min: r.vec3()?,
        aabb_max: r.vec3()?,
        centroid: r.vec3()?,
        spatial_sigma: r.f64()?,
    };
    let n = r.u32()?;
    let positions = (0..n).map(|_| r.vec3()).collect::<Result<Vec<_>>>()?;
    let n_levels = r.u32()?;
    let mut grids = Vec::with_capacity(n_levels);
    for _ in 0..n_levels {
        let plane_res = r.u32()?;
        let grid_res = r.u32()?;
        let count = r.u32()?;
        let anchors = (0..count).map(|_| r.u32().map(|v| v as u32)).collect::<Result<Vec<_>>>()?;
        grids.push((plane_res, grid_res, anchors));
    }
    let mut saved = ParamStore::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let group = ParamGroup::from_code(r.u8()?).ok_or_else(|| Error::Checkpoint(format!("`{name}`: bad group")))?;
        let per_anchor = r.u8()? != 0;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let data = r.f64s(shape.iter().product())?;
        if per_anchor {
            if shape.first() != Some(&n) {
                return Err(Error::Checkpoint(format!("`{name}` has {:?} rows for {n} anchors", shape.first())));
            }
            saved.add_per_anchor(&name, group, &shape, data);
        } else {
            saved.add(&name, group, &shape, data);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut scene = NeuralScene::from_parts(config, positions, bounds, scale_floor, &saved)?;
    if active == 0 || active > scene.cscm.levels.len() {
        return Err(Error::Checkpoint(format!("{active} active levels")));
    }
    scene.active_levels = active;
    if grids.len() != scene.cscm.levels.len() {
        return Err(Error::Checkpoint(format!("{} levels stored, config has {}", grids.len(), scene.cscm.levels.len())));
    }
    for (l, (level, (plane_res, grid_res, anchors))) in scene.cscm.levels.iter().zip(&grids).enumerate() {
        if level.resolution != *plane_res || level.grid.resolution != *grid_res || &level.grid.vertex_anchor != anchors {
            return Err(Error::Checkpoint(format!("level {} grid metadata disagrees with anchors", l + 1)));
        }
    }
    Ok((scene, iteration))
}

pub fn save(path: impl AsRef<Path>, scene: &NeuralScene, iteration: u64) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(scene, iteration)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(NeuralScene, u64)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
