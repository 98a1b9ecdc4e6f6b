//! Wavefront OBJ (ASCII `v`/`f` records) and PLY (ascii or
//! binary_little_endian) import and export. Normals, texture coordinates
//! and unknown PLY properties are skipped; polygons are fan-triangulated.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::TriMesh;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default()
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriMesh> {
    let path = path.as_ref();
    let ext = extension(path);
    if ext != "obj" && ext != "ply" {
        return Err(Error::UnsupportedFormat(format!(
            "{}: expected .obj or .ply",
            path.display()
        )));
    }
    let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut mesh = if ext == "obj" {
        load_obj_from(reader)?
    } else {
        load_ply_from(reader)?
    };
    let dropped = mesh.remove_degenerate();
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} degenerate triangles", path.display());
    }
    Ok(mesh)
}

/// Writes `.obj` as ASCII and `.ply` as binary little-endian.
pub fn save_mesh(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = extension(path);
    let file = || File::create(path).map_err(|e| Error::io(path, e));
    match ext.as_str() {
        "obj" => save_obj_to(mesh, BufWriter::new(file()?)),
        "ply" => save_ply_to(
            mesh,
            BufWriter::new(file()?),
            PlyEncoding::BinaryLittleEndian,
        ),
        _ => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: expected .obj or .ply",
                path.display()
            )))
        }
    }
    .map_err(|e| Error::io(path, e))
}

fn parse_err(location: String, message: impl Into<String>) -> Error {
    Error::Parse {
        location,
        message: message.into(),
    }
}

pub fn load_obj_from<R: BufRead>(reader: R) -> Result<TriMesh> {
    let mut vertices: Vec<[f32; 3]> = Vec::new();
    let mut triangles = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let loc = || format!("line {}", lineno + 1);
        let line = line.map_err(|e| parse_err(loc(), e.to_string()))?;
        let line = line.split('#').next().unwrap_or("");
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let mut p = [0.0f32; 3];
                for c in &mut p {
                    let tok = tokens
                        .next()
                        .ok_or_else(|| parse_err(loc(), "vertex needs 3 coordinates"))?;
                    *c = tok
                        .parse()
                        .map_err(|_| parse_err(loc(), format!("bad coordinate {tok:?}")))?;
                }
                vertices.push(p);
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in tokens {
                    let first = tok.split('/').next().unwrap_or("");
                    let raw: i64 = first
                        .parse()
                        .map_err(|_| parse_err(loc(), format!("bad face index {tok:?}")))?;
                    let n = vertices.len() as i64;
                    let resolved = if raw < 0 { n + raw } else { raw - 1 };
                    if raw == 0 || resolved < 0 || resolved >= n {
                        return Err(parse_err(
                            loc(),
                            format!(
                                "face references vertex {raw} but only {n} vertices are defined"
                            ),
                        ));
                    }
                    idx.push(resolved as u32);
                }
                if idx.len() < 3 {
                    return Err(parse_err(loc(), "face needs at least 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    TriMesh::new(vertices, triangles)
}

pub fn save_obj_to<W: Write>(mesh: &TriMesh, mut out: W) -> std::io::Result<()> {
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", v[0], v[1], v[2])?;
    }
    for t in &mesh.triangles {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    out.flush()
}

pub fn save_ply_to<W: Write>(mesh: &TriMesh, out: W, encoding: PlyEncoding) -> std::io::Result<()> {
    write_ply(mesh, None, out, encoding)
}

/// PLY with per-vertex `uchar red, green, blue` properties.
pub fn save_ply_colored_to<W: Write>(
    mesh: &TriMesh,
    colors: &[[u8; 3]],
    out: W,
    encoding: PlyEncoding,
) -> std::io::Result<()> {
    if colors.len() != mesh.vertices.len() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            format!(
                "{} colors for {} vertices",
                colors.len(),
                mesh.vertices.len()
            ),
        ));
    }
    write_ply(mesh, Some(colors), out, encoding)
}

fn write_ply<W: Write>(
    mesh: &TriMesh,
    colors: Option<&[[u8; 3]]>,
    mut out: W,
    encoding: PlyEncoding,
) -> std::io::Result<()> {
    let format = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
    };
    let color_props = if colors.is_some() {
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
    } else {
        ""
    };
    write!(
        out,
        "ply\nformat {format} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         {color_props}element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    )?;
    match encoding {
        PlyEncoding::Ascii => {
            for (i, v) in mesh.vertices.iter().enumerate() {
                match colors {
                    Some(c) => writeln!(
                        out,
                        "{} {} {} {} {} {}",
                        v[0], v[1], v[2], c[i][0], c[i][1], c[i][2]
                    )?,
                    None => writeln!(out, "{} {} {}", v[0], v[1], v[2])?,
                }
            }
            for t in &mesh.triangles {
                writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
            }
        }
        PlyEncoding::BinaryLittleEndian => {
            let mut buf = Vec::with_capacity(mesh.vertices.len() * 15 + mesh.triangles.len() * 13);
            for (i, v) in mesh.vertices.iter().enumerate() {
                for c in v {
                    buf.extend_from_slice(&c.to_le_bytes());
                }
                if let Some(c) = colors {
                    buf.extend_from_slice(&c[i]);
                }
            }
            for t in &mesh.triangles {
                buf.push(3u8);
                for i in t {
                    buf.extend_from_slice(&(*i as i32).to_le_bytes());
                }
            }
            out.write_all(&buf)?;
        }
    }
    out.flush()
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => PlyType::I8,
            "uchar" | "uint8" => PlyType::U8,
            "short" | "int16" => PlyType::I16,
            "ushort" | "uint16" => PlyType::U16,
            "int" | "int32" => PlyType::I32,
            "uint" | "uint32" => PlyType::U32,
            "float" | "float32" => PlyType::F32,
            "double" | "float64" => PlyType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyType::I8 | PlyType::U8 => 1,
            PlyType::I16 | PlyType::U16 => 2,
            PlyType::I32 | PlyType::U32 | PlyType::F32 => 4,
            PlyType::F64 => 8,
        }
    }

    fn decode_le(self, b: &[u8]) -> f64 {
        match self {
            PlyType::I8 => b[0] as i8 as f64,
            PlyType::U8 => b[0] as f64,
            PlyType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            PlyType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            PlyType::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum PlyProperty {
    Scalar {
        name: String,
        ty: PlyType,
    },
    List {
        name: String,
        count: PlyType,
        item: PlyType,
    },
}

#[derive(Debug)]
struct PlyElement {
    name: String,
    count: usize,
    props: Vec<PlyProperty>,
}

/// Cursor over the PLY body that reports byte offsets or line numbers.
enum Body {
    Ascii {
        tokens: Vec<(usize, String)>,
        pos: usize,
    },
    Binary {
        bytes: Vec<u8>,
        pos: usize,
        base: usize,
    },
}

impl Body {
    fn read(&mut self, ty: PlyType) -> Result<f64> {
        match self {
            Body::Ascii { tokens, pos } => {
                let (line, tok) = tokens
                    .get(*pos)
                    .ok_or_else(|| parse_err("end of file".into(), "unexpected end of PLY data"))?;
                *pos += 1;
                let v: f64 = tok.parse().map_err(|_| {
                    parse_err(format!("line {line}"), format!("bad number {tok:?}"))
                })?;
                Ok(v)
            }
            Body::Binary { bytes, pos, base } => {
                let n = ty.size();
                let slice = bytes.get(*pos..*pos + n).ok_or_else(|| {
                    parse_err(
                        format!("byte {}", *base + *pos),
                        "unexpected end of PLY data",
                    )
                })?;
                *pos += n;
                Ok(ty.decode_le(slice))
            }
        }
    }

    fn location(&self) -> String {
        match self {
            Body::Ascii { tokens, pos } => tokens
                .get(pos.saturating_sub(1))
                .map(|(l, _)| format!("line {l}"))
                .unwrap_or_else(|| "end of file".into()),
            Body::Binary { pos, base, .. } => format!("byte {}", base + pos),
        }
    }
}

pub fn load_ply_from<R: Read>(mut reader: R) -> Result<TriMesh> {
    let mut raw = Vec::new();
    reader
        .read_to_end(&mut raw)
        .map_err(|e| parse_err("byte 0".into(), e.to_string()))?;

    let marker = b"end_header";
    let header_end = raw
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| parse_err("header".into(), "missing end_header"))?;
    let mut body_start = header_end + marker.len();
    if raw.get(body_start) == Some(&b'\r') {
        body_start += 1;
    }
    if raw.get(body_start) == Some(&b'\n') {
        body_start += 1;
    }
    let header = String::from_utf8_lossy(&raw[..header_end]).into_owned();
    let mut lines = header.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(parse_err("line 1".into(), "missing 'ply' magic")),
    }

    let mut encoding = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    for (i, line) in lines {
        let loc = || format!("line {}", i + 1);
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["format", "ascii", _] => encoding = Some(PlyEncoding::Ascii),
            ["format", "binary_little_endian", _] => {
                encoding = Some(PlyEncoding::BinaryLittleEndian)
            }
            ["format", other, ..] => {
                return Err(Error::UnsupportedFormat(format!("PLY format {other}")));
            }
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| parse_err(loc(), format!("bad element count {count:?}")))?,
                props: Vec::new(),
            }),
            ["property", "list", count, item, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(loc(), "property before element"))?;
                let count = PlyType::parse(count)
                    .ok_or_else(|| parse_err(loc(), format!("unknown type {count:?}")))?;
                let item = PlyType::parse(item)
                    .ok_or_else(|| parse_err(loc(), format!("unknown type {item:?}")))?;
                el.props.push(PlyProperty::List {
                    name: name.to_string(),
                    count,
                    item,
                });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(loc(), "property before element"))?;
                let ty = PlyType::parse(ty)
                    .ok_or_else(|| parse_err(loc(), format!("unknown type {ty:?}")))?;
                el.props.push(PlyProperty::Scalar {
                    name: name.to_string(),
                    ty,
                });
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            _ => {
                return Err(parse_err(
                    loc(),
                    format!("unrecognized header line {line:?}"),
                ))
            }
        }
    }
    let encoding = encoding.ok_or_else(|| parse_err("header".into(), "missing format line"))?;

    let mut body = match encoding {
        PlyEncoding::Ascii => {
            let text = String::from_utf8_lossy(&raw[body_start..]);
            let first_line = header.lines().count() + 2;
            let tokens = text
                .lines()
                .enumerate()
                .flat_map(|(i, l)| {
                    l.split_whitespace()
                        .map(move |t| (first_line + i, t.to_string()))
                })
                .collect();
            Body::Ascii { tokens, pos: 0 }
        }
        PlyEncoding::BinaryLittleEndian => Body::Binary {
            bytes: raw[body_start..].to_vec(),
            pos: 0,
            base: body_start,
        },
    };

    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for el in &elements {
        for _ in 0..el.count {
            let mut xyz = [None::<f64>; 3];
            let mut face: Option<Vec<i64>> = None;
            for prop in &el.props {
                match prop {
                    PlyProperty::Scalar { name, ty } => {
                        let v = body.read(*ty)?;
                        match name.as_str() {
                            "x" => xyz[0] = Some(v),
                            "y" => xyz[1] = Some(v),
                            "z" => xyz[2] = Some(v),
                            _ => {}
                        }
                    }
                    PlyProperty::List { name, count, item } => {
                        let n = body.read(*count)?;
                        if n < 0.0 {
                            return Err(parse_err(body.location(), "negative list length"));
                        }
                        let items = (0..n as usize)
                            .map(|_| body.read(*item).map(|v| v as i64))
                            .collect::<Result<Vec<_>>>()?;
                        if name == "vertex_indices" || name == "vertex_index" {
                            face = Some(items);
                        }
                    }
                }
            }
            if el.name == "vertex" {
                match xyz {
                    [Some(x), Some(y), Some(z)] => vertices.push([x as f32, y as f32, z as f32]),
                    _ => return Err(parse_err(body.location(), "vertex lacks x/y/z")),
                }
            } else if el.name == "face" {
                let idx =
                    face.ok_or_else(|| parse_err(body.location(), "face lacks vertex_indices"))?;
                if idx.len() < 3 {
                    return Err(parse_err(body.location(), "face needs at least 3 vertices"));
                }
                if let Some(bad) = idx.iter().find(|&&i| i < 0) {
                    return Err(parse_err(
                        body.location(),
                        format!("negative vertex index {bad}"),
                    ));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0] as u32, idx[k] as u32, idx[k + 1] as u32]);
                }
            }
        }
    }
    TriMesh::new(vertices, triangles)
}

#[cfg(test)]
mod tests {
    #[test]
    fn colored_ply_loads_as_geometry() {
        let m = TriMesh::icosphere(1, 1.0, glam::DVec3::ZERO);
        let colors: Vec<[u8; 3]> = (0..m.vertices.len()).map(|i| [i as u8, 7, 200]).collect();
        for enc in [PlyEncoding::Ascii, PlyEncoding::BinaryLittleEndian] {
            let mut bytes = Vec::new();
            save_ply_colored_to(&m, &colors, &mut bytes, enc).unwrap();
            assert_eq!(load_ply_from(&bytes[..]).unwrap(), m);
        }
        assert!(save_ply_colored_to(&m, &colors[1..], Vec::new(), PlyEncoding::Ascii).is_err());
    }

    use super::*;
    use glam::DVec3;
    use proptest::prelude::*;

    #[test]
    fn quad_is_fan_triangulated() {
        let src = "# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1 4//1\n";
        let m = load_obj_from(src.as_bytes()).unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn out_of_range_face_names_the_line() {
        let mut src = String::new();
        for i in 0..8 {
            src += &format!("v {i} 0 0\n");
        }
        src += "f 1 2 9\n";
        let err = load_obj_from(src.as_bytes()).unwrap_err();
        match err {
            Error::Parse { location, message } => {
                assert_eq!(location, "line 9");
                assert!(message.contains("vertex 9"), "{message}");
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn negative_obj_indices_are_relative() {
        let src = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n";
        assert_eq!(
            load_obj_from(src.as_bytes()).unwrap().triangles,
            vec![[0, 1, 2]]
        );
    }

    #[test]
    fn unsupported_extension() {
        assert!(matches!(
            load_mesh("x.stl"),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn ply_with_extra_properties_and_big_endian() {
        let src = "ply\nformat ascii 1.0\ncomment hi\nelement vertex 3\nproperty double x\nproperty double y\n\
                   property double z\nproperty uchar red\nelement face 1\nproperty list uchar uint vertex_indices\n\
                   property float quality\nend_header\n0 0 0 9\n1 0 0 9\n0 1 0 9\n3 0 1 2 0.5\n";
        let m = load_ply_from(src.as_bytes()).unwrap();
        assert_eq!(m.vertices[1], [1.0, 0.0, 0.0]);
        assert_eq!(m.triangles, vec![[0, 1, 2]]);

        let be = "ply\nformat binary_big_endian 1.0\nelement vertex 0\nend_header\n";
        assert!(matches!(
            load_ply_from(be.as_bytes()),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn truncated_binary_ply_reports_byte_offset() {
        let m = TriMesh::icosphere(0, 1.0, DVec3::ZERO);
        let mut bytes = Vec::new();
        save_ply_to(&m, &mut bytes, PlyEncoding::BinaryLittleEndian).unwrap();
        bytes.truncate(bytes.len() - 5);
        match load_ply_from(&bytes[..]).unwrap_err() {
            Error::Parse { location, .. } => assert!(location.starts_with("byte ")),
            e => panic!("unexpected {e:?}"),
        }
    }

    fn arb_mesh() -> impl Strategy<Value = TriMesh> {
        (3usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(prop::array::uniform3(-1e4f32..1e4), n),
                prop::collection::vec(prop::array::uniform3(0..n as u32), 1..60),
            )
                .prop_map(|(v, t)| TriMesh::new(v, t).unwrap())
        })
    }

    proptest! {
        #[test]
        fn all_encodings_round_trip(m in arb_mesh()) {
            let mut obj = Vec::new();
            save_obj_to(&m, &mut obj).unwrap();
            prop_assert_eq!(&load_obj_from(&obj[..]).unwrap(), &m);
            for enc in [PlyEncoding::Ascii, PlyEncoding::BinaryLittleEndian] {
                let mut ply = Vec::new();
                save_ply_to(&m, &mut ply, enc).unwrap();
                prop_assert_eq!(&load_ply_from(&ply[..]).unwrap(), &m);
            }
        }
    }
}
