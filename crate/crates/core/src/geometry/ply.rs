//! PLY reader/writer for colored point clouds (ascii and binary).
//!
//! Only the `vertex` element is interpreted; other elements are parsed and
//! skipped. Integer colors are scaled by their type's maximum, float colors
//! are taken as already in `[0, 1]`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::cloud::{PointCloud, Vec3};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
    BinaryBigEndian,
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
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn color_scale(self) -> f64 {
        match self {
            Scalar::U8 | Scalar::I8 => 255.0,
            Scalar::U16 | Scalar::I16 => 65535.0,
            Scalar::U32 | Scalar::I32 => u32::MAX as f64,
            Scalar::F32 | Scalar::F64 => 1.0,
        }
    }
}

#[derive(Clone, Debug)]
enum Property {
    Scalar(String, Scalar),
    List(Scalar, Scalar),
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    body_offset: usize,
}

fn perr(path: &Path, message: impl Into<String>) -> Error {
    Error::Ply {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    let end_marker = b"end_header";
    let pos = bytes
        .windows(end_marker.len())
        .position(|w| w == end_marker)
        .ok_or_else(|| perr(path, "missing end_header"))?;
    let mut body_offset = pos + end_marker.len();
    // the header line ends with \n or \r\n
    if bytes.get(body_offset) == Some(&b'\r') {
        body_offset += 1;
    }
    if bytes.get(body_offset) == Some(&b'\n') {
        body_offset += 1;
    }
    let text = std::str::from_utf8(&bytes[..pos]).map_err(|_| perr(path, "header is not UTF-8"))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(perr(path, "missing ply magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", f, _version] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    "binary_big_endian" => PlyFormat::BinaryBigEndian,
                    other => return Err(perr(path, format!("unknown format {other}"))),
                })
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| perr(path, format!("bad element count {count}")))?,
                props: Vec::new(),
            }),
            ["property", "list", ct, it, _name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| perr(path, "property before element"))?;
                let ct = Scalar::parse(ct).ok_or_else(|| perr(path, format!("bad type {ct}")))?;
                let it = Scalar::parse(it).ok_or_else(|| perr(path, format!("bad type {it}")))?;
                el.props.push(Property::List(ct, it));
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| perr(path, "property before element"))?;
                let ty = Scalar::parse(ty).ok_or_else(|| perr(path, format!("bad type {ty}")))?;
                el.props.push(Property::Scalar(name.to_string(), ty));
            }
            _ => return Err(perr(path, format!("unrecognized header line `{line}`"))),
        }
    }
    Ok(Header {
        format: format.ok_or_else(|| perr(path, "missing format line"))?,
        elements,
        body_offset,
    })
}

/// Sequential reader over the body in either encoding.
struct Body<'a> {
    format: PlyFormat,
    bytes: &'a [u8],
    pos: usize,
    tokens: std::str::SplitAsciiWhitespace<'a>,
}

impl<'a> Body<'a> {
    fn read(&mut self, path: &Path, ty: Scalar) -> Result<f64> {
        match self.format {
            PlyFormat::Ascii => {
                let t = self
                    .tokens
                    .next()
                    .ok_or_else(|| perr(path, "unexpected end of ascii body"))?;
                t.parse::<f64>()
                    .map_err(|_| perr(path, format!("bad number `{t}`")))
            }
            _ => {
                let n = ty.size();
                let raw = self
                    .bytes
                    .get(self.pos..self.pos + n)
                    .ok_or_else(|| perr(path, "unexpected end of binary body"))?;
                self.pos += n;
                let mut buf = [0u8; 8];
                buf[..n].copy_from_slice(raw);
                if self.format == PlyFormat::BinaryBigEndian {
                    buf[..n].reverse();
                }
                Ok(match ty {
                    Scalar::I8 => buf[0] as i8 as f64,
                    Scalar::U8 => buf[0] as f64,
                    Scalar::I16 => i16::from_le_bytes([buf[0], buf[1]]) as f64,
                    Scalar::U16 => u16::from_le_bytes([buf[0], buf[1]]) as f64,
                    Scalar::I32 => i32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
                    Scalar::U32 => u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
                    Scalar::F32 => f32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
                    Scalar::F64 => f64::from_le_bytes(buf),
                })
            }
        }
    }
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(path, &bytes)
}

fn parse_ply(path: &Path, bytes: &[u8]) -> Result<PointCloud> {
    let header = parse_header(path, bytes)?;
    let body_bytes = &bytes[header.body_offset..];
    let ascii = if header.format == PlyFormat::Ascii {
        std::str::from_utf8(body_bytes).map_err(|_| perr(path, "ascii body is not UTF-8"))?
    } else {
        ""
    };
    let mut body = Body {
        format: header.format,
        bytes: body_bytes,
        pos: 0,
        tokens: ascii.split_ascii_whitespace(),
    };

    let mut cloud = None;
    for el in &header.elements {
        if el.name != "vertex" {
            for _ in 0..el.count {
                for p in &el.props {
                    match p {
                        Property::Scalar(_, t) => {
                            body.read(path, *t)?;
                        }
                        Property::List(ct, it) => {
                            let n = body.read(path, *ct)? as usize;
                            for _ in 0..n {
                                body.read(path, *it)?;
                            }
                        }
                    }
                }
            }
            continue;
        }
        let find = |names: &[&str]| {
            el.props.iter().position(|p| match p {
                Property::Scalar(n, _) => names.contains(&n.as_str()),
                Property::List(..) => false,
            })
        };
        let xyz = [find(&["x"]), find(&["y"]), find(&["z"])];
        let rgb = [
            find(&["red", "r", "diffuse_red"]),
            find(&["green", "g", "diffuse_green"]),
            find(&["blue", "b", "diffuse_blue"]),
        ];
        if xyz.iter().any(Option::is_none) {
            return Err(perr(path, "vertex element lacks x/y/z"));
        }
        let has_color = rgb.iter().all(Option::is_some);
        if !has_color {
            log::warn!("{}: no vertex colors, using mid gray", path.display());
        }
        let mut coords = Vec::with_capacity(el.count);
        let mut colors = Vec::with_capacity(el.count);
        let mut row = vec![0.0; el.props.len()];
        for _ in 0..el.count {
            for (k, p) in el.props.iter().enumerate() {
                row[k] = match p {
                    Property::Scalar(_, t) => body.read(path, *t)?,
                    Property::List(ct, it) => {
                        let n = body.read(path, *ct)? as usize;
                        for _ in 0..n {
                            body.read(path, *it)?;
                        }
                        0.0
                    }
                };
            }
            let p: Vec3 = [row[xyz[0].unwrap()], row[xyz[1].unwrap()], row[xyz[2].unwrap()]];
            coords.push(p);
            if has_color {
                let mut c = [0.0; 3];
                for k in 0..3 {
                    let idx = rgb[k].unwrap();
                    let scale = match &el.props[idx] {
                        Property::Scalar(_, t) => t.color_scale(),
                        Property::List(..) => 1.0,
                    };
                    c[k] = (row[idx] / scale).clamp(0.0, 1.0);
                }
                colors.push(c);
            } else {
                colors.push([0.5; 3]);
            }
        }
        cloud = Some(PointCloud::new(coords, colors)?);
    }
    cloud.ok_or_else(|| perr(path, "no vertex element"))
}

/// Writes float coordinates and 8-bit colors.
pub fn write_ply(path: &Path, pc: &PointCloud, format: PlyFormat) -> Result<()> {
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
        PlyFormat::BinaryBigEndian => "binary_big_endian",
    };
    let mut out = Vec::new();
    let header = format!(
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        pc.len()
    );
    out.extend_from_slice(header.as_bytes());
    for (p, c) in pc.coords().iter().zip(pc.colors()) {
        let rgb = c.map(|v| (v * 255.0).round() as u8);
        match format {
            PlyFormat::Ascii => {
                writeln!(
                    out,
                    "{} {} {} {} {} {}",
                    p[0] as f32, p[1] as f32, p[2] as f32, rgb[0], rgb[1], rgb[2]
                )
                .expect("write to Vec");
            }
            PlyFormat::BinaryLittleEndian => {
                for v in p {
                    out.extend_from_slice(&(*v as f32).to_le_bytes());
                }
                out.extend_from_slice(&rgb);
            }
            PlyFormat::BinaryBigEndian => {
                for v in p {
                    out.extend_from_slice(&(*v as f32).to_be_bytes());
                }
                out.extend_from_slice(&rgb);
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
