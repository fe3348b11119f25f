//! On-disk formats.
//!
//! A volume is stored as a directory holding `header.json` and a raw
//! little-endian `f32` payload, `payload.f32`, in `c,z,y,x` row-major order.
//! Checkpoints follow the same pattern (`meta.json` + `weights.f32`).
//! Every directory is written to a temporary sibling and renamed into place,
//! so a reader never observes a half-written artifact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::volume::VolumeGrid;

pub const VOLUME_VERSION: u32 = 1;
pub const HEADER_FILE: &str = "header.json";
pub const PAYLOAD_FILE: &str = "payload.f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub version: u32,
    pub dims: [usize; 3],
    pub channels: usize,
    pub dtype: String,
    pub spacing: [f64; 3],
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
    pub layout: String,
}

pub fn encode_f32(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f32(bytes: &[u8], path: &Path) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::format(
            path,
            format!("payload length {} is not a multiple of 4", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

fn tmp_sibling(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    path.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

/// Write `files` (name, bytes) into directory `path`, replacing it atomically.
pub fn write_dir_atomic(path: &Path, files: &[(&str, &[u8])]) -> Result<()> {
    let tmp = tmp_sibling(path);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    for (name, bytes) in files {
        let p = tmp.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    if path.exists() {
        fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Write a single file via a temporary sibling and rename.
pub fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_sibling(path);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// SHA-256 over the files of an artifact directory (sorted by name) or of a
/// single file.
pub fn hash_path(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    if path.is_dir() {
        let mut names: Vec<_> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .map(|e| e.file_name())
            .collect();
        names.sort();
        for name in names {
            hasher.update(name.to_string_lossy().as_bytes());
            hasher.update([0u8]);
            hasher.update(read_file(&path.join(&name))?);
        }
    } else {
        hasher.update(read_file(path)?);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn header_of(grid: &VolumeGrid) -> VolumeHeader {
    VolumeHeader {
        version: VOLUME_VERSION,
        dims: grid.dims(),
        channels: grid.channels(),
        dtype: "f32le".into(),
        spacing: grid.spacing(),
        scale: grid.scale().to_vec(),
        offset: grid.offset().to_vec(),
        layout: "c,z,y,x".into(),
    }
}

pub fn save_volume(grid: &VolumeGrid, path: impl AsRef<Path>) -> Result<()> {
    let header = serde_json::to_vec_pretty(&header_of(grid))?;
    let payload = encode_f32(grid.data().iter().copied());
    write_dir_atomic(
        path.as_ref(),
        &[(HEADER_FILE, &header), (PAYLOAD_FILE, &payload)],
    )
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<VolumeGrid> {
    let path = path.as_ref();
    let hpath = path.join(HEADER_FILE);
    let header: VolumeHeader = serde_json::from_slice(&read_file(&hpath)?)
        .map_err(|e| Error::format(&hpath, e.to_string()))?;
    if header.version != VOLUME_VERSION {
        return Err(Error::format(
            &hpath,
            format!("unsupported version {}", header.version),
        ));
    }
    if header.dtype != "f32le" {
        return Err(Error::format(
            &hpath,
            format!("unsupported dtype {:?}", header.dtype),
        ));
    }
    if header.layout != "c,z,y,x" {
        return Err(Error::format(
            &hpath,
            format!("unsupported layout {:?}", header.layout),
        ));
    }
    if header.scale.len() != header.channels || header.offset.len() != header.channels {
        return Err(Error::format(
            &hpath,
            "scale/offset need one entry per channel",
        ));
    }
    let ppath = path.join(PAYLOAD_FILE);
    let bytes = read_file(&ppath)?;
    let expected = header.channels * header.dims.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            &ppath,
            format!(
                "payload has {} bytes, header implies {expected}",
                bytes.len()
            ),
        ));
    }
    let data = decode_f32(&bytes, &ppath)?;
    let mut grid =
        VolumeGrid::new_unchecked_range(header.dims, header.channels, data, header.spacing)
            .map_err(|e| Error::format(&hpath, e.to_string()))?
            .with_transform(header.scale, header.offset)?;
    grid.normalize_ingested()?;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..2 * 3 * 4 * 5)
            .map(|i| ((i * 7919) % 1000) as f32 / 999.0)
            .collect();
        let g = VolumeGrid::new([3, 4, 5], 2, data, [4.0, 1.0, 0.5]).unwrap();
        let p = dir.path().join("g.volume");
        save_volume(&g, &p).unwrap();
        let h = hash_path(&p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back, g);
        assert_eq!(
            back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        save_volume(&back, &p).unwrap();
        assert_eq!(hash_path(&p).unwrap(), h);
    }

    #[test]
    fn constant_volume_payload() {
        let dir = tempfile::tempdir().unwrap();
        let g = VolumeGrid::filled([2, 2, 2], 1, 0.5, [1.0; 3]).unwrap();
        let p = dir.path().join("c.volume");
        save_volume(&g, &p).unwrap();
        let bytes = std::fs::read(p.join(PAYLOAD_FILE)).unwrap();
        assert_eq!(bytes.len(), 32);
        assert!(bytes.chunks(4).all(|b| b == 0.5f32.to_le_bytes()));
    }

    #[test]
    fn ingestion_normalizes_out_of_range_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("raw.volume");
        let header = VolumeHeader {
            version: 1,
            dims: [1, 2, 2],
            channels: 1,
            dtype: "f32le".into(),
            spacing: [1.0; 3],
            scale: vec![1.0],
            offset: vec![0.0],
            layout: "c,z,y,x".into(),
        };
        let payload = encode_f32([0.0, 255.0, 51.0, 102.0]);
        write_dir_atomic(
            &p,
            &[
                (HEADER_FILE, &serde_json::to_vec(&header).unwrap()),
                (PAYLOAD_FILE, &payload),
            ],
        )
        .unwrap();
        let g = load_volume(&p).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.2, 0.4]);
        assert!((g.scale()[0] - 1.0 / 255.0).abs() < 1e-15);
        assert_eq!(g.offset()[0], 0.0);
    }

    #[test]
    fn format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let g = VolumeGrid::filled([2, 2, 2], 1, 0.25, [1.0; 3]).unwrap();
        let p = dir.path().join("v.volume");
        save_volume(&g, &p).unwrap();
        std::fs::write(p.join(PAYLOAD_FILE), encode_f32([0.1f32; 7])).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format { .. })));

        save_volume(&g, &p).unwrap();
        let mut h: VolumeHeader =
            serde_json::from_slice(&std::fs::read(p.join(HEADER_FILE)).unwrap()).unwrap();
        h.version = 2;
        std::fs::write(p.join(HEADER_FILE), serde_json::to_vec(&h).unwrap()).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format { .. })));
    }
}
