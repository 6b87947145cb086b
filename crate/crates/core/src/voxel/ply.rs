//! Minimal PLY support: ASCII and binary little-endian vertex positions in,
//! binary little-endian `int32` positions out.

use std::io::Write;
use std::path::Path;

use super::{PointCloudFrame, VoxelCoord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List(String),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Debug)]
struct Header {
    format: Format,
    elements: Vec<Element>,
    body_offset: usize,
    body_line: usize,
}

fn err(location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Ply {
        location: location.into(),
        message: message.into(),
    }
}

fn parse_header(data: &[u8]) -> Result<Header> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let end = data[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| err(format!("line {}", line_no + 1), "header not terminated"))?;
        let line = std::str::from_utf8(&data[pos..pos + end])
            .map_err(|_| err(format!("line {}", line_no + 1), "header is not utf-8"))?
            .trim_end_matches('\r')
            .trim();
        pos += end + 1;
        line_no += 1;
        let loc = || format!("line {line_no}");
        let mut words = line.split_whitespace();
        let kw = words.next().unwrap_or("");
        if line_no == 1 {
            if line != "ply" {
                return Err(err(loc(), "missing 'ply' magic"));
            }
            continue;
        }
        match kw {
            "format" => {
                format = Some(match words.next() {
                    Some("ascii") => Format::Ascii,
                    Some("binary_little_endian") => Format::BinaryLe,
                    Some(other) => return Err(err(loc(), format!("unsupported format {other}"))),
                    None => return Err(err(loc(), "format line without a format")),
                });
            }
            "comment" | "obj_info" | "" => {}
            "element" => {
                let name = words.next().ok_or_else(|| err(loc(), "element without name"))?;
                let count = words
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| err(loc(), "element without a valid count"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            "property" => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| err(loc(), "property before any element"))?;
                let ty = words.next().ok_or_else(|| err(loc(), "property without type"))?;
                if ty == "list" {
                    let _ = words.next();
                    let _ = words.next();
                    let name = words.next().ok_or_else(|| err(loc(), "list without name"))?;
                    el.props.push(Property::List(name.to_string()));
                } else {
                    let scalar =
                        Scalar::parse(ty).ok_or_else(|| err(loc(), format!("unknown property type {ty}")))?;
                    let name = words.next().ok_or_else(|| err(loc(), "property without name"))?;
                    el.props.push(Property::Scalar(name.to_string(), scalar));
                }
            }
            "end_header" => {
                let format = format.ok_or_else(|| err(loc(), "no format line"))?;
                return Ok(Header {
                    format,
                    elements,
                    body_offset: pos,
                    body_line: line_no + 1,
                });
            }
            other => return Err(err(loc(), format!("unexpected header keyword {other}"))),
        }
    }
}

/// Reads raw vertex positions from a PLY file.
pub fn read_ply_positions(path: &Path) -> Result<Vec<[f64; 3]>> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply_positions(&data)
}

pub fn parse_ply_positions(data: &[u8]) -> Result<Vec<[f64; 3]>> {
    let header = parse_header(data)?;
    let vi = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| err("header", "no vertex element"))?;
    let vertex = &header.elements[vi];
    let mut axis = [usize::MAX; 3];
    for (i, p) in vertex.props.iter().enumerate() {
        if let Property::Scalar(name, _) = p {
            match name.as_str() {
                "x" => axis[0] = i,
                "y" => axis[1] = i,
                "z" => axis[2] = i,
                _ => {}
            }
        }
    }
    if axis.contains(&usize::MAX) {
        return Err(err("header", "vertex element lacks x/y/z"));
    }
    match header.format {
        Format::Ascii => read_ascii(data, &header, vi, axis),
        Format::BinaryLe => read_binary(data, &header, vi, axis),
    }
}

fn read_ascii(data: &[u8], header: &Header, vi: usize, axis: [usize; 3]) -> Result<Vec<[f64; 3]>> {
    let body = std::str::from_utf8(&data[header.body_offset..])
        .map_err(|_| err(format!("line {}", header.body_line), "ascii body is not utf-8"))?;
    let mut lines = body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    // one line per element instance, elements in header order
    for el in &header.elements[..vi] {
        for _ in 0..el.count {
            lines
                .next()
                .ok_or_else(|| err("end of file", format!("missing {} rows", el.name)))?;
        }
    }
    let vertex = &header.elements[vi];
    let mut out = Vec::with_capacity(vertex.count);
    for _ in 0..vertex.count {
        let (idx, line) = lines
            .next()
            .ok_or_else(|| err("end of file", "fewer vertices than declared"))?;
        let loc = || format!("line {}", header.body_line + idx);
        let vals: Vec<&str> = line.split_whitespace().collect();
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = vals
                .get(axis[a])
                .ok_or_else(|| err(loc(), "too few values in vertex row"))?
                .parse::<f64>()
                .map_err(|e| err(loc(), e.to_string()))?;
        }
        out.push(p);
    }
    Ok(out)
}

fn read_binary(data: &[u8], header: &Header, vi: usize, axis: [usize; 3]) -> Result<Vec<[f64; 3]>> {
    let mut pos = header.body_offset;
    for el in &header.elements[..vi] {
        let mut row = 0;
        for p in &el.props {
            match p {
                Property::Scalar(_, s) => row += s.size(),
                Property::List(name) => {
                    return Err(err(
                        format!("byte {pos}"),
                        format!("cannot skip list property {name} before vertex data"),
                    ))
                }
            }
        }
        pos += row * el.count;
    }
    let vertex = &header.elements[vi];
    let mut offsets = Vec::with_capacity(vertex.props.len());
    let mut row = 0;
    for p in &vertex.props {
        match p {
            Property::Scalar(_, s) => {
                offsets.push((row, *s));
                row += s.size();
            }
            Property::List(name) => {
                return Err(err("header", format!("list property {name} in vertex element")));
            }
        }
    }
    let need = pos + row * vertex.count;
    if data.len() < need {
        return Err(err(
            format!("byte {}", data.len()),
            format!("vertex data truncated, need {need} bytes"),
        ));
    }
    let mut out = Vec::with_capacity(vertex.count);
    for i in 0..vertex.count {
        let base = pos + i * row;
        let mut p = [0.0; 3];
        for a in 0..3 {
            let (off, s) = offsets[axis[a]];
            p[a] = s.read_le(&data[base + off..]);
        }
        out.push(p);
    }
    Ok(out)
}

/// Floors `p * scale` onto the lattice and builds an occupancy frame.
pub fn quantize_positions(positions: &[[f64; 3]], scale: f64, precision_bits: u32) -> Result<PointCloudFrame> {
    if positions.is_empty() {
        return Err(Error::EmptyFrame);
    }
    let lim = (1i64 << precision_bits) as f64;
    let mut pts = Vec::with_capacity(positions.len());
    for p in positions {
        let q = p.map(|v| (v * scale).floor());
        if q.iter().any(|&v| !v.is_finite() || v < 0.0 || v >= lim) {
            return Err(Error::OutOfCube {
                coord: q.map(|v| v as i32),
                depth: precision_bits,
            });
        }
        pts.push(VoxelCoord::new(q[0] as i32, q[1] as i32, q[2] as i32));
    }
    PointCloudFrame::from_points(precision_bits, pts)
}

/// Loads a PLY whose positions are already in lattice units.
pub fn load_ply(path: &Path, precision_bits: u32) -> Result<PointCloudFrame> {
    quantize_positions(&read_ply_positions(path)?, 1.0, precision_bits)
}

/// Loads a PLY captured at `source_bits` precision and requantizes it to
/// `precision_bits` (e.g. 11 -> 9 divides by 4 before flooring).
pub fn load_ply_rescaled(path: &Path, source_bits: u32, precision_bits: u32) -> Result<PointCloudFrame> {
    let scale = 2f64.powi(precision_bits as i32 - source_bits as i32);
    quantize_positions(&read_ply_positions(path)?, scale, precision_bits)
}

pub fn encode_ply(coords: &[VoxelCoord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(128 + coords.len() * 12);
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty int x\nproperty int y\nproperty int z\nend_header\n",
        coords.len()
    )
    .unwrap();
    for c in coords {
        for v in [c.x, c.y, c.z] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_ply(path: &Path, coords: &[VoxelCoord]) -> Result<()> {
    std::fs::write(path, encode_ply(coords)).map_err(|e| Error::io(path, e))
}
