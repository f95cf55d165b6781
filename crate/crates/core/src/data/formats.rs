//! Point-cloud file formats.
//!
//! - ASCII OFF: vertices are read, faces ignored; writing emits vertices
//!   only. Coordinates use the shortest round-trip decimal form, so a
//!   write/read cycle is bit-exact.
//! - Scan `.bin`: packed little-endian f32 quadruples (x, y, z,
//!   reflectance); the reflectance channel is dropped on read and written
//!   as zero.
//! - ASCII PLY with per-vertex `uchar` color, for visual inspection of
//!   registration results.
//!
//! Parse failures report the byte offset of the offending token.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform};

/// Iterates lines of `text` together with the byte offset of each line start.
struct Lines<'a> {
    rest: &'a str,
    offset: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines { rest: text, offset: 0 }
    }
}

impl<'a> Iterator for Lines<'a> {
    type Item = (usize, &'a str);

    fn next(&mut self) -> Option<(usize, &'a str)> {
        if self.rest.is_empty() {
            return None;
        }
        let start = self.offset;
        let (line, consumed) = match self.rest.find('\n') {
            Some(i) => (&self.rest[..i], i + 1),
            None => (self.rest, self.rest.len()),
        };
        self.rest = &self.rest[consumed..];
        self.offset += consumed;
        Some((start, line.trim_end_matches('\r')))
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset, message: message.into() }
}

fn parse_f64(token: &str, offset: usize, what: &str) -> Result<f64> {
    token
        .parse::<f64>()
        .map_err(|_| parse_err(offset, format!("expected {what}, found {token:?}")))
}

fn parse_usize(token: &str, offset: usize, what: &str) -> Result<usize> {
    token
        .parse::<usize>()
        .map_err(|_| parse_err(offset, format!("expected {what}, found {token:?}")))
}

/// Skips blank and `#`-comment lines.
fn meaningful(item: &(usize, &str)) -> bool {
    let t = item.1.trim();
    !t.is_empty() && !t.starts_with('#')
}

/// Reads the vertex block of an ASCII OFF file. Faces are ignored. Accepts
/// both the two-line header (`OFF` then counts) and the merged single-line
/// variant (`OFF nv nf ne`).
pub fn read_off(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = Lines::new(&text).filter(meaningful);

    let (header_off, header) = lines
        .next()
        .ok_or_else(|| parse_err(0, "empty OFF file"))?;
    let header = header.trim();
    if !header.starts_with("OFF") {
        return Err(parse_err(header_off, format!("expected OFF header, found {header:?}")));
    }
    let after = header["OFF".len()..].trim();
    let (counts_off, counts_line) = if after.is_empty() {
        lines
            .next()
            .ok_or_else(|| parse_err(text.len(), "missing OFF count line"))?
    } else {
        (header_off, after)
    };
    let counts: Vec<&str> = counts_line.split_whitespace().collect();
    if counts.len() < 2 {
        return Err(parse_err(counts_off, format!(
            "expected vertex and face counts, found {counts_line:?}"
        )));
    }
    let n_vertices = parse_usize(counts[0], counts_off, "vertex count")?;
    if n_vertices == 0 {
        return Err(parse_err(counts_off, "OFF file declares zero vertices"));
    }

    let mut points = Vec::with_capacity(n_vertices);
    for _ in 0..n_vertices {
        let (off, line) = lines
            .next()
            .ok_or_else(|| parse_err(text.len(), format!(
                "file ends after {} of {} vertices", points.len(), n_vertices
            )))?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() < 3 {
            return Err(parse_err(off, format!("expected 3 coordinates, found {line:?}")));
        }
        let p = [
            parse_f64(tokens[0], off, "x coordinate")?,
            parse_f64(tokens[1], off, "y coordinate")?,
            parse_f64(tokens[2], off, "z coordinate")?,
        ];
        if p.iter().any(|c| !c.is_finite()) {
            return Err(parse_err(off, format!("non-finite vertex {line:?}")));
        }
        points.push(p);
    }
    PointCloud::new(points)
}

/// Writes a vertices-only ASCII OFF file with shortest round-trip decimals.
pub fn write_off(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = String::new();
    out.push_str("OFF\n");
    out.push_str(&format!("{} 0 0\n", cloud.len()));
    for p in cloud.points() {
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

const BIN_RECORD: usize = 16; // four little-endian f32 per point

/// Reads a packed scan file: little-endian f32 quadruples, reflectance
/// dropped.
pub fn read_kitti_bin(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() % BIN_RECORD != 0 {
        return Err(parse_err(
            bytes.len() - bytes.len() % BIN_RECORD,
            format!("trailing {} bytes do not form a 16-byte point record", bytes.len() % BIN_RECORD),
        ));
    }
    if bytes.is_empty() {
        return Err(parse_err(0, "scan file contains no points"));
    }
    let mut points = Vec::with_capacity(bytes.len() / BIN_RECORD);
    for (i, rec) in bytes.chunks_exact(BIN_RECORD).enumerate() {
        let read = |j: usize| f32::from_le_bytes(rec[4 * j..4 * j + 4].try_into().unwrap());
        let p = [read(0) as f64, read(1) as f64, read(2) as f64];
        if p.iter().any(|c| !c.is_finite()) {
            return Err(parse_err(i * BIN_RECORD, "non-finite point record"));
        }
        points.push(p);
    }
    PointCloud::new(points)
}

/// Writes a packed scan file; coordinates narrow to f32 and reflectance is
/// written as zero.
pub fn write_kitti_bin(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut bytes = Vec::with_capacity(cloud.len() * BIN_RECORD);
    for p in cloud.points() {
        for c in p {
            bytes.extend_from_slice(&(*c as f32).to_le_bytes());
        }
        bytes.extend_from_slice(&0.0f32.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// One colored vertex of a PLY export.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlyPoint {
    pub position: [f64; 3],
    pub color: [u8; 3],
}

/// Source points are blue, target points green, virtual correspondences red.
pub const COLOR_SOURCE: [u8; 3] = [0, 0, 255];
pub const COLOR_TARGET: [u8; 3] = [0, 255, 0];
pub const COLOR_VIRTUAL: [u8; 3] = [255, 0, 0];

/// Writes colored vertices as ASCII PLY.
pub fn write_ply(path: &Path, points: &[PlyPoint]) -> Result<()> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", points.len()));
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    out.push_str("end_header\n");
    for p in points {
        out.push_str(&format!(
            "{} {} {} {} {} {}\n",
            p.position[0], p.position[1], p.position[2], p.color[0], p.color[1], p.color[2]
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads the PLY dialect produced by [`write_ply`]: ASCII, double
/// coordinates, uchar RGB.
pub fn read_ply(path: &Path) -> Result<Vec<PlyPoint>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = Lines::new(&text);

    let (off, magic) = lines.next().ok_or_else(|| parse_err(0, "empty PLY file"))?;
    if magic.trim() != "ply" {
        return Err(parse_err(off, format!("expected ply magic, found {magic:?}")));
    }
    let mut count: Option<usize> = None;
    let mut properties: Vec<String> = Vec::new();
    let data_start = loop {
        let (off, line) = lines
            .next()
            .ok_or_else(|| parse_err(text.len(), "missing end_header"))?;
        let line = line.trim();
        if line == "end_header" {
            break off;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["format", "ascii", "1.0"] => {}
            ["format", rest @ ..] => {
                return Err(parse_err(off, format!("unsupported PLY format {rest:?}")))
            }
            ["comment", ..] => {}
            ["element", "vertex", n] => count = Some(parse_usize(n, off, "vertex count")?),
            ["element", kind, ..] => {
                return Err(parse_err(off, format!("unsupported element {kind:?}")))
            }
            ["property", ty, name] => {
                let ok = matches!((*ty, *name), ("double" | "float", "x" | "y" | "z"))
                    || matches!((*ty, *name), ("uchar", "red" | "green" | "blue"));
                if !ok {
                    return Err(parse_err(off, format!("unsupported property {ty} {name}")));
                }
                properties.push(name.to_string());
            }
            _ => return Err(parse_err(off, format!("unrecognized header line {line:?}"))),
        }
    };
    let count = count.ok_or_else(|| parse_err(data_start, "missing element vertex line"))?;
    if properties != ["x", "y", "z", "red", "green", "blue"] {
        return Err(parse_err(
            data_start,
            format!("expected properties x y z red green blue, found {properties:?}"),
        ));
    }

    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let (off, line) = lines.next().filter(meaningful).ok_or_else(|| {
            parse_err(text.len(), format!("file ends after {} of {count} vertices", points.len()))
        })?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 6 {
            return Err(parse_err(off, format!("expected 6 fields, found {line:?}")));
        }
        let mut position = [0.0; 3];
        for (i, slot) in position.iter_mut().enumerate() {
            *slot = parse_f64(tokens[i], off, "coordinate")?;
        }
        let mut color = [0u8; 3];
        for (i, slot) in color.iter_mut().enumerate() {
            let v = parse_usize(tokens[3 + i], off, "color channel")?;
            *slot = u8::try_from(v)
                .map_err(|_| parse_err(off, format!("color channel {v} exceeds 255")))?;
        }
        points.push(PlyPoint { position, color });
    }
    Ok(points)
}

/// Colored overlay of a registration result: the source (optionally moved by
/// `estimate`), the target, and the virtual correspondence points.
pub fn registration_ply(
    source: &PointCloud,
    target: &PointCloud,
    virtuals: &[[f64; 3]],
    estimate: Option<&RigidTransform>,
) -> Vec<PlyPoint> {
    let mut out = Vec::with_capacity(source.len() + target.len() + virtuals.len());
    for p in source.points() {
        let position = match estimate {
            Some(t) => t.apply(*p),
            None => *p,
        };
        out.push(PlyPoint { position, color: COLOR_SOURCE });
    }
    for p in target.points() {
        out.push(PlyPoint { position: *p, color: COLOR_TARGET });
    }
    for v in virtuals {
        out.push(PlyPoint { position: *v, color: COLOR_VIRTUAL });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sphere_surface;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn off_round_trip_is_bit_exact() {
        let dir = tmp();
        let path = dir.path().join("cloud.off");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = sphere_surface(64, 1.0, &mut rng).unwrap();
        write_off(&path, &cloud).unwrap();
        let back = read_off(&path).unwrap();
        assert_eq!(cloud, back);
    }

    #[test]
    fn off_accepts_merged_header_and_ignores_faces() {
        let dir = tmp();
        let path = dir.path().join("merged.off");
        std::fs::write(&path, "# comment\nOFF 3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n").unwrap();
        let cloud = read_off(&path).unwrap();
        assert_eq!(cloud.len(), 3);
        assert_eq!(cloud.point(1), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn off_parse_errors_carry_byte_offsets() {
        let dir = tmp();
        let path = dir.path().join("bad.off");
        let content = "OFF\n2 0 0\n0 0 0\n1 oops 0\n";
        std::fs::write(&path, content).unwrap();
        let err = read_off(&path).unwrap_err();
        match err {
            crate::Error::Parse { offset, .. } => {
                assert_eq!(offset, content.find("1 oops").unwrap());
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn off_truncated_vertex_block_is_reported() {
        let dir = tmp();
        let path = dir.path().join("short.off");
        std::fs::write(&path, "OFF\n5 0 0\n0 0 0\n").unwrap();
        let err = read_off(&path).unwrap_err();
        assert!(err.to_string().contains("1 of 5"), "{err}");
    }

    #[test]
    fn bin_round_trip_is_stable_after_first_write() {
        let dir = tmp();
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = sphere_surface(32, 10.0, &mut rng).unwrap();
        write_kitti_bin(&a, &cloud).unwrap();
        let first = read_kitti_bin(&a).unwrap();
        write_kitti_bin(&b, &first).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(first, read_kitti_bin(&b).unwrap());
    }

    #[test]
    fn bin_rejects_trailing_bytes() {
        let dir = tmp();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, vec![0u8; 20]).unwrap();
        let err = read_kitti_bin(&path).unwrap_err();
        match err {
            crate::Error::Parse { offset, .. } => assert_eq!(offset, 16),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn ply_round_trip_preserves_positions_and_colors() {
        let dir = tmp();
        let path = dir.path().join("overlay.ply");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let source = sphere_surface(8, 1.0, &mut rng).unwrap();
        let target = sphere_surface(9, 1.0, &mut rng).unwrap();
        let virtuals = vec![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]];
        let points = registration_ply(&source, &target, &virtuals, None);
        write_ply(&path, &points).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(points, back);
        assert_eq!(back.iter().filter(|p| p.color == COLOR_SOURCE).count(), 8);
        assert_eq!(back.iter().filter(|p| p.color == COLOR_TARGET).count(), 9);
        assert_eq!(back.iter().filter(|p| p.color == COLOR_VIRTUAL).count(), 2);
    }

    #[test]
    fn ply_reader_rejects_binary_format() {
        let dir = tmp();
        let path = dir.path().join("bin.ply");
        std::fs::write(&path, "ply\nformat binary_little_endian 1.0\nend_header\n").unwrap();
        assert!(read_ply(&path).is_err());
    }

    #[test]
    fn registration_ply_can_apply_the_estimate() {
        let source = PointCloud::new(vec![[1.0, 0.0, 0.0]]).unwrap();
        let target = PointCloud::new(vec![[0.0, 0.0, 0.0]]).unwrap();
        let t = RigidTransform::from_parts(
            nalgebra::Matrix3::identity(),
            nalgebra::Vector3::new(0.0, 0.0, 5.0),
        )
        .unwrap();
        let points = registration_ply(&source, &target, &[], Some(&t));
        assert_eq!(points[0].position, [1.0, 0.0, 5.0]);
    }
}
