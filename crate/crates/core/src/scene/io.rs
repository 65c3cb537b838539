use std::fmt;
use std::path::Path;

use thiserror::Error;

use super::mlp::LAYERS;
use super::{
    build_occupancy_hierarchy, BitGrid, FeatureStore, GridGeometry, MlpLayout, MlpSet, QuantScales,
    Scene, SceneError,
};

pub const MAGIC: [u8; 4] = *b"EDRN";
pub const VERSION: u32 = 1;

/// File sections in on-disk order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Section {
    Magic,
    Header,
    MicroBitmap,
    Features,
    Mlp,
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Section::Magic => "magic",
            Section::Header => "header",
            Section::MicroBitmap => "micro bitmap",
            Section::Features => "feature blocks",
            Section::Mlp => "mlp blocks",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated in {section}")]
    Truncated { section: Section },
    #[error("{0} unexpected bytes after the last section")]
    TrailingBytes(usize),
    #[error("inconsistent scene: {0}")]
    Invalid(#[from] SceneError),
}

/// Serializes a scene. Layout, little-endian throughout:
///
/// ```text
/// "EDRN" u32:version
/// u32:coarse_dim u32:feature_dim u32:freq_bands u32:hidden
/// f32:feature_scale f32:weight_scale[3] f32:bias_scale[3] f32:act_scale[3] f32:sigma_scale
/// micro bitmap, x-fastest, LSB-first, ceil(n/8) bytes
/// per occupied fine voxel (linear order): 125*F nibbles, low nibble first
/// per occupied coarse voxel (linear order): INT8 W1 b1 W2 b2 W3 b3, row-major
/// ```
pub fn write_scene(scene: &Scene) -> Vec<u8> {
    let layout = scene.mlps.layout();
    let scales = scene.mlps.scales();
    let freq_bands = (layout.input - scene.features.dim()) / 6;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    for v in [
        VERSION,
        scene.geometry().coarse_dim() as u32,
        scene.features.dim() as u32,
        freq_bands as u32,
        layout.hidden as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let floats = std::iter::once(scene.features.scale())
        .chain(scales.weight)
        .chain(scales.bias)
        .chain(scales.act)
        .chain(std::iter::once(scene.sigma_scale));
    for f in floats {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out.extend_from_slice(&scene.hierarchy.to_micro_bitmap().to_bytes());
    out.extend_from_slice(scene.features.packed());
    out.extend(scene.mlps.blocks().iter().map(|&b| b as u8));
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: Section) -> Result<&'a [u8], LoadError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(LoadError::Truncated { section })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, section: Section) -> Result<u32, LoadError> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn f32(&mut self, section: Section) -> Result<f32, LoadError> {
        Ok(f32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }
}

pub fn read_scene(bytes: &[u8]) -> Result<Scene, LoadError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, Section::Magic)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(LoadError::BadMagic(magic));
    }
    let version = r.u32(Section::Header)?;
    if version != VERSION {
        return Err(LoadError::UnsupportedVersion(version));
    }
    let coarse_dim = r.u32(Section::Header)? as usize;
    let feature_dim = r.u32(Section::Header)? as usize;
    let freq_bands = r.u32(Section::Header)? as usize;
    let hidden = r.u32(Section::Header)? as usize;
    let feature_scale = r.f32(Section::Header)?;
    let mut scales = QuantScales { weight: [0.0; LAYERS], bias: [0.0; LAYERS], act: [0.0; LAYERS] };
    for arr in [&mut scales.weight, &mut scales.bias, &mut scales.act] {
        for v in arr.iter_mut() {
            *v = r.f32(Section::Header)?;
        }
    }
    let sigma_scale = r.f32(Section::Header)?;
    if feature_dim == 0 || feature_dim > 64 || hidden == 0 || hidden > 256 || freq_bands > 16 {
        return Err(SceneError::Parameter("network or feature shape out of range".into()).into());
    }

    let g = GridGeometry::new(coarse_dim)?;
    let md = g.micro_dim();
    let micro_bytes = r.take((md * md * md).div_ceil(8), Section::MicroBitmap)?;
    let micro = BitGrid::from_bytes(md, micro_bytes).expect("length checked by take");
    let hierarchy = build_occupancy_hierarchy(&micro, g)?;

    let feature_len = hierarchy.fine().count_ones() * FeatureStore::block_bytes_for(feature_dim);
    let packed = r.take(feature_len, Section::Features)?.to_vec();
    let features = FeatureStore::from_packed(g, &hierarchy, feature_dim, feature_scale, packed)?;

    let layout = MlpLayout::new(feature_dim, freq_bands, hidden);
    let mlp_len = hierarchy.coarse().count_ones() * layout.block_len();
    let blocks = r.take(mlp_len, Section::Mlp)?.iter().map(|&b| b as i8).collect();
    let mlps = MlpSet::from_quantized(&hierarchy, layout, scales, blocks)?;

    if r.pos != bytes.len() {
        return Err(LoadError::TrailingBytes(bytes.len() - r.pos));
    }
    if !(sigma_scale > 0.0 && sigma_scale.is_finite()) {
        return Err(SceneError::Parameter(format!("sigma_scale {sigma_scale}")).into());
    }
    Ok(Scene::new(hierarchy, features, mlps, sigma_scale)?)
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> std::io::Result<()> {
    std::fs::write(path, write_scene(scene))
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene, LoadError> {
    read_scene(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_procedural_scene, SceneSpec, SpherePrimitive};

    fn scene() -> Scene {
        let spec = SceneSpec {
            coarse_dim: 2,
            noise_rate: 0.01,
            spheres: vec![SpherePrimitive { center: [0.4, 0.5, 0.6], radius: 0.3, shell: Some(0.05) }],
            ..SceneSpec::default()
        };
        generate_procedural_scene(&spec, 5).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let s = scene();
        let bytes = write_scene(&s);
        let back = read_scene(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(write_scene(&back), bytes);
    }

    #[test]
    fn corrupted_magic_and_version() {
        let mut bytes = write_scene(&scene());
        bytes[8] = 7;
        assert!(matches!(read_scene(&bytes), Err(LoadError::Invalid(_) | LoadError::Truncated { .. })));
        let mut bytes = write_scene(&scene());
        bytes[4] = 2;
        assert!(matches!(read_scene(&bytes), Err(LoadError::UnsupportedVersion(2))));
        bytes[0] = b'X';
        assert!(matches!(read_scene(&bytes), Err(LoadError::BadMagic(_))));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = write_scene(&scene());
        bytes.push(0);
        assert!(matches!(read_scene(&bytes), Err(LoadError::TrailingBytes(1))));
    }
}
