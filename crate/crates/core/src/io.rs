//! File formats: the binary grid container and ASCII PLY.
//!
//! Grid container layout: one JSON header line `{"w":W,"h":H,"kind":K}`
//! terminated by `\n`, then `W*H` little-endian `f32` values in azimuth-major
//! order (row `i` = azimuth, column `j` = elevation, offset `i*H + j`), then
//! `W*H` mask bytes (`1` valid, `0` invalid). Distance matrices use kind
//! `"dm"`; stat maps use `"snr"`, `"var"` and `"detp"`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DistanceMatrix, Point3, PointCloud};
use crate::grid::Grid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Dm,
    Snr,
    Var,
    Detp,
    Rcs,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    w: usize,
    h: usize,
    kind: GridKind,
}

/// A decoded container: values, mask and kind.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFile {
    pub kind: GridKind,
    pub values: Grid<f64>,
    pub mask: Grid<bool>,
}

pub fn encode_grid(kind: GridKind, values: &Grid<f64>, mask: &Grid<bool>) -> Result<Vec<u8>> {
    crate::grid::ensure_same_shape(values.shape(), mask.shape())?;
    let header = serde_json::to_string(&Header {
        w: values.w(),
        h: values.h(),
        kind,
    })?;
    let mut out = Vec::with_capacity(header.len() + 1 + values.len() * 5);
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n');
    for v in values.as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.extend(mask.as_slice().iter().map(|&m| m as u8));
    Ok(out)
}

pub fn decode_grid(bytes: &[u8], origin: &Path) -> Result<GridFile> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(origin, "missing header line"))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::format(origin, format!("bad header: {e}")))?;
    let n = header.w * header.h;
    let body = &bytes[nl + 1..];
    if body.len() != n * 5 {
        return Err(Error::format(
            origin,
            format!("payload is {} bytes, expected {}", body.len(), n * 5),
        ));
    }
    let values: Vec<f64> = body[..n * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mask: Vec<bool> = body[n * 4..].iter().map(|&b| b != 0).collect();
    Ok(GridFile {
        kind: header.kind,
        values: Grid::from_vec(header.w, header.h, values)?,
        mask: Grid::from_vec(header.w, header.h, mask)?,
    })
}

pub fn write_grid(
    path: &Path,
    kind: GridKind,
    values: &Grid<f64>,
    mask: &Grid<bool>,
) -> Result<()> {
    let bytes = encode_grid(kind, values, mask)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<GridFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(&bytes, path)
}

pub fn encode_dm(dm: &DistanceMatrix) -> Result<Vec<u8>> {
    encode_grid(GridKind::Dm, dm.values(), dm.valid())
}

pub fn write_dm(path: &Path, dm: &DistanceMatrix) -> Result<()> {
    write_grid(path, GridKind::Dm, dm.values(), dm.valid())
}

pub fn read_dm(path: &Path) -> Result<DistanceMatrix> {
    let g = read_grid(path)?;
    if g.kind != GridKind::Dm {
        return Err(Error::format(path, format!("expected kind dm, got {:?}", g.kind)));
    }
    DistanceMatrix::new(g.values, g.mask)
}

/// Read a dense map (stat maps, RCS) and check its kind.
pub fn read_map(path: &Path, kind: GridKind) -> Result<Grid<f64>> {
    let g = read_grid(path)?;
    if g.kind != kind {
        return Err(Error::format(
            path,
            format!("expected kind {kind:?}, got {:?}", g.kind),
        ));
    }
    Ok(g.values)
}

pub fn write_map(path: &Path, kind: GridKind, values: &Grid<f64>) -> Result<()> {
    let mask = Grid::filled(values.w(), values.h(), true);
    write_grid(path, kind, values, &mask)
}

pub fn ply_string(pc: &PointCloud) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    s.push_str(&format!("element vertex {}\n", pc.len()));
    s.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in &pc.points {
        s.push_str(&format!("{} {} {}\n", p.x as f32, p.y as f32, p.z as f32));
    }
    s
}

pub fn pointcloud_to_ply(pc: &PointCloud, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(ply_string(pc).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn parse_ply(text: &str, origin: &Path) -> Result<PointCloud> {
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(Error::format(origin, "missing ply magic"));
    }
    let mut count = None;
    for line in lines.by_ref() {
        if line == "end_header" {
            break;
        }
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = Some(
                rest.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::format(origin, format!("bad vertex count: {e}")))?,
            );
        }
    }
    let count = count.ok_or_else(|| Error::format(origin, "no vertex element"))?;
    let mut points = Vec::with_capacity(count);
    for line in lines.take(count) {
        let xyz: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(origin, format!("bad vertex: {e}")))?;
        if xyz.len() != 3 {
            return Err(Error::format(origin, "vertex needs three coordinates"));
        }
        points.push(Point3::new(xyz[0], xyz[1], xyz[2]));
    }
    if points.len() != count {
        return Err(Error::format(origin, "truncated vertex list"));
    }
    Ok(PointCloud::new(points))
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_cloud_has_zero_vertices() {
        let s = ply_string(&PointCloud::default());
        assert!(s.contains("element vertex 0\n"));
        assert!(s.ends_with("end_header\n"));
    }

    #[test]
    fn single_point_line() {
        let s = ply_string(&PointCloud::new(vec![Point3::new(1.0, 2.0, 3.0)]));
        assert!(s.ends_with("end_header\n1 2 3\n"));
    }

    #[test]
    fn ply_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let pc = PointCloud::new(vec![
            Point3::new(0.125, -3.5, 10.25),
            Point3::new(12.345678, 0.0, -7.000001),
        ]);
        pointcloud_to_ply(&pc, &path).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in pc.points.iter().zip(&back.points) {
            assert!(a.dist2(b).sqrt() <= 1e-6 * (1.0 + a.norm()));
        }
    }

    #[test]
    fn dm_header_is_json_line() {
        let dm = DistanceMatrix::full(Grid::filled(2, 3, 1.5)).unwrap();
        let bytes = encode_dm(&dm).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(&bytes[..nl], br#"{"w":2,"h":3,"kind":"dm"}"#);
        assert_eq!(bytes.len(), nl + 1 + 6 * 5);
    }

    #[test]
    fn wrong_kind_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.grid");
        write_map(&path, GridKind::Snr, &Grid::filled(2, 2, 1.0)).unwrap();
        assert!(read_dm(&path).is_err());
        assert!(read_map(&path, GridKind::Snr).is_ok());
    }

    #[test]
    fn truncated_payload_rejected() {
        let dm = DistanceMatrix::full(Grid::filled(2, 2, 1.0)).unwrap();
        let mut bytes = encode_dm(&dm).unwrap();
        bytes.pop();
        assert!(decode_grid(&bytes, Path::new("mem")).is_err());
    }

    proptest! {
        #[test]
        fn dm_container_round_trip(
            vals in proptest::collection::vec((0.0f64..100.0, any::<bool>()), 12)
        ) {
            let values = Grid::from_vec(3, 4, vals.iter().map(|v| v.0).collect()).unwrap();
            let valid = Grid::from_vec(3, 4, vals.iter().map(|v| v.1).collect()).unwrap();
            let dm = DistanceMatrix::new(values, valid).unwrap();
            let back = decode_grid(&encode_dm(&dm).unwrap(), Path::new("mem")).unwrap();
            let back = DistanceMatrix::new(back.values, back.mask).unwrap();
            prop_assert_eq!(back.valid(), dm.valid());
            for (a, b) in back.values().as_slice().iter().zip(dm.values().as_slice()) {
                prop_assert!((a - b).abs() <= 1e-5 * b.max(1.0));
            }
        }
    }
}
