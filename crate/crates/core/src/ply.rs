//! PLY import/export for voxelized geometry, plus a color-coded export of
//! motion fields. Reading accepts ASCII and binary little-endian files with
//! any scalar vertex layout that includes x, y, z; writing emits exactly
//! those three properties.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::inter::MotionField;
use crate::sparse::{Coord, CoordSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(token: &str) -> Option<ScalarType> {
        Some(match token {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(&self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn read_le(&self, bytes: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => bytes[0] as i8 as f64,
            ScalarType::U8 => bytes[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            ScalarType::I32 => {
                i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64
            }
            ScalarType::U32 => {
                u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64
            }
            ScalarType::F32 => {
                f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64
            }
            ScalarType::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }
}

struct Header {
    format: PlyFormat,
    count: usize,
    properties: Vec<ScalarType>,
    /// Property indices of x, y, z.
    xyz: [usize; 3],
    /// Byte offset where the payload begins.
    body_start: usize,
}

fn header_err(line_no: usize, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("PLY header line {line_no}: {msg}"))
}

/// Parses the textual header. `line_no` is 1-based, counting every header
/// line including `ply` and `end_header`.
fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut pos = 0usize;
    let mut line_no = 0usize;
    let mut next_line = || -> Result<(usize, String)> {
        if pos >= bytes.len() {
            return Err(Error::Format(format!(
                "PLY header line {}: file ends before end_header",
                line_no + 1
            )));
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos] != b'\n' {
            pos += 1;
        }
        let mut end = pos;
        if pos < bytes.len() {
            pos += 1;
        }
        if end > start && bytes[end - 1] == b'\r' {
            end -= 1;
        }
        line_no += 1;
        let text = std::str::from_utf8(&bytes[start..end])
            .map_err(|_| header_err(line_no, "not valid UTF-8"))?;
        Ok((line_no, text.to_string()))
    };

    let (n, magic) = next_line()?;
    if magic.trim() != "ply" {
        return Err(header_err(n, "expected \"ply\""));
    }

    let mut format: Option<PlyFormat> = None;
    let mut count: Option<usize> = None;
    let mut properties: Vec<ScalarType> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut in_vertex = false;

    loop {
        let (n, line) = next_line()?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.first().copied() {
            None => continue,
            Some("comment") | Some("obj_info") => continue,
            Some("format") => {
                if toks.len() != 3 || toks[2] != "1.0" {
                    return Err(header_err(n, "expected \"format <kind> 1.0\""));
                }
                format = Some(match toks[1] {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLe,
                    other => {
                        return Err(header_err(
                            n,
                            format!("unsupported format {other:?}"),
                        ))
                    }
                });
            }
            Some("element") => {
                if toks.len() != 3 {
                    return Err(header_err(n, "expected \"element <name> <count>\""));
                }
                if toks[1] != "vertex" {
                    return Err(header_err(
                        n,
                        format!("only vertex elements are supported, found {:?}", toks[1]),
                    ));
                }
                if count.is_some() {
                    return Err(header_err(n, "duplicate vertex element"));
                }
                count = Some(
                    toks[2]
                        .parse()
                        .map_err(|_| header_err(n, format!("bad count {:?}", toks[2])))?,
                );
                in_vertex = true;
            }
            Some("property") => {
                if !in_vertex {
                    return Err(header_err(n, "property before any element"));
                }
                if toks.get(1).copied() == Some("list") {
                    return Err(header_err(n, "list properties are not supported"));
                }
                if toks.len() != 3 {
                    return Err(header_err(n, "expected \"property <type> <name>\""));
                }
                let ty = ScalarType::parse(toks[1])
                    .ok_or_else(|| header_err(n, format!("unknown type {:?}", toks[1])))?;
                properties.push(ty);
                names.push(toks[2].to_string());
            }
            Some("end_header") => break,
            Some(other) => {
                return Err(header_err(n, format!("unrecognized keyword {other:?}")))
            }
        }
    }

    let format = format.ok_or_else(|| header_err(line_no, "missing format line"))?;
    let count = count.ok_or_else(|| header_err(line_no, "missing vertex element"))?;
    let mut xyz = [usize::MAX; 3];
    for (i, name) in names.iter().enumerate() {
        match name.as_str() {
            "x" => xyz[0] = i,
            "y" => xyz[1] = i,
            "z" => xyz[2] = i,
            _ => {}
        }
    }
    if xyz.contains(&usize::MAX) {
        return Err(header_err(line_no, "vertex element lacks x, y, z"));
    }
    Ok(Header { format, count, properties, xyz, body_start: pos })
}

/// Reads a point cloud. Fractional coordinates are floored onto the
/// lattice; duplicate points collapse.
pub fn read_ply(path: &Path) -> Result<CoordSet> {
    let bytes = fs::read(path)?;
    let h = parse_header(&bytes)?;
    let mut coords: Vec<Coord> = Vec::with_capacity(h.count);
    match h.format {
        PlyFormat::Ascii => {
            let body = std::str::from_utf8(&bytes[h.body_start..])
                .map_err(|_| Error::Format("PLY body: not valid UTF-8".into()))?;
            let mut lines = body.lines();
            for i in 0..h.count {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::Format(format!("PLY body: vertex {i} missing")))?;
                let toks: Vec<&str> = line.split_whitespace().collect();
                if toks.len() != h.properties.len() {
                    return Err(Error::Format(format!(
                        "PLY body: vertex {i} has {} values, expected {}",
                        toks.len(),
                        h.properties.len()
                    )));
                }
                let mut c = [0i32; 3];
                for d in 0..3 {
                    let v: f64 = toks[h.xyz[d]].parse().map_err(|_| {
                        Error::Format(format!(
                            "PLY body: vertex {i} has non-numeric coordinate {:?}",
                            toks[h.xyz[d]]
                        ))
                    })?;
                    c[d] = floor_i32(v, i)?;
                }
                coords.push(c);
            }
        }
        PlyFormat::BinaryLe => {
            let row: usize = h.properties.iter().map(|t| t.size()).sum();
            let need = h.count * row;
            let body = &bytes[h.body_start..];
            if body.len() < need {
                return Err(Error::Format(format!(
                    "PLY body: {} bytes for {} vertices, need {need}",
                    body.len(),
                    h.count
                )));
            }
            let mut offsets = Vec::with_capacity(h.properties.len());
            let mut acc = 0usize;
            for t in &h.properties {
                offsets.push(acc);
                acc += t.size();
            }
            for i in 0..h.count {
                let base = i * row;
                let mut c = [0i32; 3];
                for d in 0..3 {
                    let p = h.xyz[d];
                    let t = h.properties[p];
                    let v = t.read_le(&body[base + offsets[p]..]);
                    c[d] = floor_i32(v, i)?;
                }
                coords.push(c);
            }
        }
    }
    CoordSet::new(coords, 1)
}

fn floor_i32(v: f64, vertex: usize) -> Result<i32> {
    if !v.is_finite() || v.floor() < i32::MIN as f64 || v.floor() > i32::MAX as f64 {
        return Err(Error::Format(format!(
            "PLY body: vertex {vertex} coordinate {v} out of range"
        )));
    }
    Ok(v.floor() as i32)
}

/// Writes geometry as float32 x, y, z (exact for any coordinate this crate
/// can produce).
pub fn write_ply(path: &Path, cloud: &CoordSet, format: PlyFormat) -> Result<()> {
    let mut out = Vec::new();
    let kind = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLe => "binary_little_endian",
    };
    write!(
        out,
        "ply\nformat {kind} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    )?;
    for c in cloud.coords() {
        match format {
            PlyFormat::Ascii => writeln!(out, "{} {} {}", c[0], c[1], c[2])?,
            PlyFormat::BinaryLe => {
                for d in 0..3 {
                    out.extend_from_slice(&(c[d] as f32).to_le_bytes());
                }
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes a motion field as a colored cloud: the channel-mean displacement
/// maps onto RGB symmetrically around mid-gray, scaled by the largest
/// absolute component. A zero field is uniform (128, 128, 128); negating
/// the field mirrors every color around gray.
pub fn write_flow_ply(path: &Path, field: &MotionField) -> Result<()> {
    let n = field.coords.len();
    let ch = field.channels();
    let mut mean = vec![[0.0f64; 3]; n];
    for (i, m) in mean.iter_mut().enumerate() {
        for c in 0..ch {
            let f = field.flow(i, c);
            for d in 0..3 {
                m[d] += f[d] / ch as f64;
            }
        }
    }
    let scale = mean
        .iter()
        .flat_map(|m| m.iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max);
    let byte = |v: f64| -> u8 {
        if scale == 0.0 {
            128
        } else {
            (128.0 + 127.0 * v / scale).round().clamp(0.0, 255.0) as u8
        }
    };

    let mut out = Vec::new();
    write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {n}\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
    )?;
    for (i, c) in field.coords.coords().iter().enumerate() {
        writeln!(
            out,
            "{} {} {} {} {} {}",
            c[0],
            c[1],
            c[2],
            byte(mean[i][0]),
            byte(mean[i][1]),
            byte(mean[i][2])
        )?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Re-grids a cloud to a shallower bit depth by floor division, collapsing
/// points that land in the same cell.
pub fn quantize_coords(cloud: &CoordSet, from_bits: u8, to_bits: u8) -> Result<CoordSet> {
    if to_bits > from_bits {
        return Err(Error::Config(format!(
            "cannot quantize {from_bits}-bit coordinates up to {to_bits} bits"
        )));
    }
    let shift = from_bits - to_bits;
    let coords: Vec<Coord> = cloud
        .coords()
        .iter()
        .map(|c| [c[0] >> shift, c[1] >> shift, c[2] >> shift])
        .collect();
    CoordSet::new(coords, cloud.stride())
}
