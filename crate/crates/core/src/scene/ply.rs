//! Reader and writer for the PLY subset used for scenes: a single `vertex`
//! element with float32 `x y z`, uint8 `red green blue` and optional float32
//! `nx ny nz`, stored as ASCII or binary little-endian.

use std::fmt::Write as _;

use crate::error::{Error, Result};

use super::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlyCloud {
    pub positions: Vec<Vec3>,
    /// RGB mapped to [0, 1].
    pub colors: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    F32,
    U8,
}

impl Kind {
    fn size(self) -> usize {
        match self {
            Kind::F32 => 4,
            Kind::U8 => 1,
        }
    }
}

const PROPS: [(&str, Kind); 9] = [
    ("x", Kind::F32),
    ("y", Kind::F32),
    ("z", Kind::F32),
    ("red", Kind::U8),
    ("green", Kind::U8),
    ("blue", Kind::U8),
    ("nx", Kind::F32),
    ("ny", Kind::F32),
    ("nz", Kind::F32),
];

struct Header {
    format: PlyFormat,
    count: usize,
    /// Column of each entry of `PROPS` in the file, if present.
    columns: [Option<usize>; 9],
    kinds: Vec<Kind>,
    body_offset: usize,
    body_line: usize,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut offset = 0;
    let mut line_no = 0;
    let mut format = None;
    let mut count = None;
    let mut columns = [None; 9];
    let mut kinds = Vec::new();
    let mut in_vertex = false;

    loop {
        line_no += 1;
        let rest = &bytes[offset..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err(line_no, "unterminated header (missing end_header)"))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| parse_err(line_no, "header is not valid UTF-8"))?
            .trim_end_matches('\r')
            .trim();
        offset += end + 1;
        let tokens: Vec<&str> = line.split_whitespace().collect();

        if line_no == 1 {
            if line != "ply" {
                return Err(parse_err(1, "missing 'ply' magic"));
            }
            continue;
        }
        match tokens.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", f, "1.0"] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(parse_err(line_no, format!("unsupported format '{other}'"))),
                });
            }
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(parse_err(line_no, "duplicate vertex element"));
                }
                count = Some(
                    n.parse::<usize>()
                        .map_err(|_| parse_err(line_no, format!("bad vertex count '{n}'")))?,
                );
                in_vertex = true;
            }
            ["element", name, _] => {
                return Err(parse_err(line_no, format!("unsupported element '{name}'")));
            }
            ["property", ty, name] => {
                if !in_vertex {
                    return Err(parse_err(line_no, "property outside the vertex element"));
                }
                let kind = match *ty {
                    "float" | "float32" => Kind::F32,
                    "uchar" | "uint8" => Kind::U8,
                    other => return Err(parse_err(line_no, format!("unsupported property type '{other}'"))),
                };
                let slot = PROPS
                    .iter()
                    .position(|(n, _)| n == name)
                    .ok_or_else(|| parse_err(line_no, format!("unexpected property '{name}'")))?;
                if PROPS[slot].1 != kind {
                    return Err(parse_err(line_no, format!("property '{name}' has type '{ty}'")));
                }
                if columns[slot].is_some() {
                    return Err(parse_err(line_no, format!("duplicate property '{name}'")));
                }
                columns[slot] = Some(kinds.len());
                kinds.push(kind);
            }
            ["end_header"] => break,
            _ => return Err(parse_err(line_no, format!("unrecognized header line '{line}'"))),
        }
    }

    let format = format.ok_or_else(|| parse_err(line_no, "missing format line"))?;
    let count = count.ok_or_else(|| parse_err(line_no, "missing vertex element"))?;
    for slot in 0..6 {
        if columns[slot].is_none() {
            return Err(parse_err(line_no, format!("missing property '{}'", PROPS[slot].0)));
        }
    }
    let normals = columns[6..].iter().filter(|c| c.is_some()).count();
    if normals != 0 && normals != 3 {
        return Err(parse_err(line_no, "normals must declare all of nx, ny, nz"));
    }
    Ok(Header {
        format,
        count,
        columns,
        kinds,
        body_offset: offset,
        body_line: line_no + 1,
    })
}

/// Parses a PLY file from memory.
pub fn read_ply(bytes: &[u8]) -> Result<PlyCloud> {
    let h = parse_header(bytes)?;
    let body = &bytes[h.body_offset..];
    let has_normals = h.columns[6].is_some();
    let mut rows: Vec<[f64; 9]> = Vec::with_capacity(h.count);

    match h.format {
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(body)
                .map_err(|_| parse_err(h.body_line, "ASCII body is not valid UTF-8"))?;
            let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
            for i in 0..h.count {
                let (ln, line) = lines.next().ok_or_else(|| {
                    Error::Data(format!("file ends after {i} of {} points", h.count))
                })?;
                let line_no = h.body_line + ln;
                let vals: Vec<&str> = line.split_whitespace().collect();
                if vals.len() != h.kinds.len() {
                    return Err(parse_err(
                        line_no,
                        format!("expected {} values, found {}", h.kinds.len(), vals.len()),
                    ));
                }
                let mut row = [0.0; 9];
                for (slot, col) in h.columns.iter().enumerate() {
                    if let Some(c) = *col {
                        let tok = vals[c];
                        let parsed = match PROPS[slot].1 {
                            Kind::F32 => tok.parse::<f32>().ok().map(f64::from),
                            Kind::U8 => tok.parse::<u8>().ok().map(f64::from),
                        };
                        row[slot] = parsed.ok_or_else(|| {
                            parse_err(line_no, format!("bad value '{tok}' for {}", PROPS[slot].0))
                        })?;
                    }
                }
                rows.push(row);
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let stride: usize = h.kinds.iter().map(|k| k.size()).sum();
            let mut offsets = Vec::with_capacity(h.kinds.len());
            let mut acc = 0;
            for k in &h.kinds {
                offsets.push(acc);
                acc += k.size();
            }
            if body.len() < stride * h.count {
                return Err(Error::Data(format!(
                    "binary body holds {} bytes, need {}",
                    body.len(),
                    stride * h.count
                )));
            }
            for rec in body.chunks_exact(stride).take(h.count) {
                let mut row = [0.0; 9];
                for (slot, col) in h.columns.iter().enumerate() {
                    if let Some(c) = *col {
                        let at = offsets[c];
                        row[slot] = match PROPS[slot].1 {
                            Kind::F32 => f64::from(f32::from_le_bytes(rec[at..at + 4].try_into().unwrap())),
                            Kind::U8 => f64::from(rec[at]),
                        };
                    }
                }
                rows.push(row);
            }
        }
    }

    let mut cloud = PlyCloud {
        positions: Vec::with_capacity(h.count),
        colors: Vec::with_capacity(h.count),
        normals: has_normals.then(|| Vec::with_capacity(h.count)),
    };
    for (i, r) in rows.iter().enumerate() {
        if !r[..3].iter().all(|v| v.is_finite()) {
            return Err(Error::Data(format!("non-finite coordinate at point {i}")));
        }
        cloud.positions.push(Vec3::new(r[0], r[1], r[2]));
        cloud.colors.push(Vec3::new(r[3], r[4], r[5]) / 255.0);
        if let Some(n) = &mut cloud.normals {
            n.push(Vec3::new(r[6], r[7], r[8]));
        }
    }
    Ok(cloud)
}

fn to_u8(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Serializes a cloud. Positions and normals are written as float32.
pub fn write_ply(cloud: &PlyCloud, format: PlyFormat) -> Vec<u8> {
    let mut header = String::from("ply\n");
    header.push_str(match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    let _ = writeln!(header, "element vertex {}", cloud.positions.len());
    for (name, kind) in PROPS.iter().take(if cloud.normals.is_some() { 9 } else { 6 }) {
        let ty = if *kind == Kind::F32 { "float" } else { "uchar" };
        let _ = writeln!(header, "property {ty} {name}");
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();

    for i in 0..cloud.positions.len() {
        let p = cloud.positions[i];
        let c = cloud.colors[i];
        let n = cloud.normals.as_ref().map(|n| n[i]);
        match format {
            PlyFormat::Ascii => {
                let mut line = format!(
                    "{} {} {} {} {} {}",
                    p.x as f32,
                    p.y as f32,
                    p.z as f32,
                    to_u8(c.x),
                    to_u8(c.y),
                    to_u8(c.z)
                );
                if let Some(n) = n {
                    let _ = write!(line, " {} {} {}", n.x as f32, n.y as f32, n.z as f32);
                }
                line.push('\n');
                out.extend_from_slice(line.as_bytes());
            }
            PlyFormat::BinaryLittleEndian => {
                for v in p.iter() {
                    out.extend_from_slice(&(*v as f32).to_le_bytes());
                }
                out.extend_from_slice(&[to_u8(c.x), to_u8(c.y), to_u8(c.z)]);
                if let Some(n) = n {
                    for v in n.iter() {
                        out.extend_from_slice(&(*v as f32).to_le_bytes());
                    }
                }
            }
        }
    }
    out
}
