//! PLY reading and writing for the vertex element.
//!
//! Supported: `format ascii 1.0` and `format binary_little_endian 1.0`,
//! scalar vertex properties of any standard type. `x`, `y`, `z` are required;
//! `red`, `green`, `blue` and `label` are optional; anything else is skipped
//! with a warning. Class names travel as `comment class <id> <name>` lines.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use super::{PointCloud, SceneError, DEFAULT_COLOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlyFormat {
    Ascii,
    #[default]
    BinaryLittleEndian,
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
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
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
            Self::I8 => f64::from(b[0] as i8),
            Self::U8 => f64::from(b[0]),
            Self::I16 => f64::from(i16::from_le_bytes([b[0], b[1]])),
            Self::U16 => f64::from(u16::from_le_bytes([b[0], b[1]])),
            Self::I32 => f64::from(i32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Self::U32 => f64::from(u32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Self::F32 => f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    X,
    Y,
    Z,
    Red,
    Green,
    Blue,
    Label,
    Skip,
}

#[derive(Debug)]
struct Property {
    ty: ScalarType,
    role: Role,
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
    has_list: bool,
}

#[derive(Debug)]
struct Header {
    binary: bool,
    elements: Vec<Element>,
    class_names: Vec<(u32, String)>,
    /// Byte length of the header including the `end_header` line.
    len: usize,
}

fn header_err(line: usize, message: impl Into<String>) -> SceneError {
    SceneError::Header {
        line,
        message: message.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header, SceneError> {
    let mut offset = 0;
    let mut lines = Vec::new();
    loop {
        let rest = &bytes[offset..];
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            return Err(header_err(lines.len() + 1, "missing end_header"));
        };
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| header_err(lines.len() + 1, "header is not valid UTF-8"))?
            .trim_end_matches('\r')
            .to_owned();
        offset += nl + 1;
        let done = line.trim() == "end_header";
        lines.push(line);
        if done {
            break;
        }
    }

    if lines[0].trim() != "ply" {
        return Err(header_err(1, "file does not start with `ply`"));
    }
    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut class_names = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(1) {
        let lineno = i + 1;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                let fmt = tok.next().unwrap_or_default();
                let version = tok.next().unwrap_or_default();
                if version != "1.0" {
                    return Err(header_err(lineno, format!("unsupported version `{version}`")));
                }
                binary = Some(match fmt {
                    "ascii" => false,
                    "binary_little_endian" => true,
                    other => {
                        return Err(header_err(lineno, format!("unsupported format `{other}`")))
                    }
                });
            }
            Some("comment") => {
                if tok.next() == Some("class") {
                    let id = tok.next().and_then(|t| t.parse::<u32>().ok());
                    let name = tok.collect::<Vec<_>>().join(" ");
                    match id {
                        Some(id) if !name.is_empty() => class_names.push((id, name)),
                        _ => return Err(header_err(lineno, "bad class comment")),
                    }
                }
            }
            Some("obj_info") => {}
            Some("element") => {
                let name = tok
                    .next()
                    .ok_or_else(|| header_err(lineno, "element without name"))?;
                let count = tok
                    .next()
                    .and_then(|t| t.parse::<usize>().ok())
                    .ok_or_else(|| header_err(lineno, "element without valid count"))?;
                elements.push(Element {
                    name: name.to_owned(),
                    count,
                    props: Vec::new(),
                    has_list: false,
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| header_err(lineno, "property before any element"))?;
                let ty_name = tok.next().unwrap_or_default();
                if ty_name == "list" {
                    if element.name == "vertex" {
                        return Err(header_err(lineno, "list properties on vertex are unsupported"));
                    }
                    element.has_list = true;
                    continue;
                }
                let ty = ScalarType::parse(ty_name)
                    .ok_or_else(|| header_err(lineno, format!("unknown property type `{ty_name}`")))?;
                let name = tok
                    .next()
                    .ok_or_else(|| header_err(lineno, "property without name"))?;
                let role = match name {
                    "x" => Role::X,
                    "y" => Role::Y,
                    "z" => Role::Z,
                    "red" => Role::Red,
                    "green" => Role::Green,
                    "blue" => Role::Blue,
                    "label" => Role::Label,
                    _ => Role::Skip,
                };
                if element.name == "vertex" && role == Role::Skip {
                    log::warn!("skipping unknown vertex property `{name}`");
                }
                element.props.push(Property { ty, role });
            }
            Some("end_header") => {}
            Some(other) => return Err(header_err(lineno, format!("unknown keyword `{other}`"))),
            None => {}
        }
    }
    let binary = binary.ok_or_else(|| header_err(2, "missing format line"))?;
    Ok(Header {
        binary,
        elements,
        class_names,
        len: offset,
    })
}

/// Read a PLY file into a [`PointCloud`].
pub fn load_cloud(path: impl AsRef<Path>) -> Result<PointCloud, SceneError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| SceneError::Io {
        path: path.to_owned(),
        source,
    })?;
    read_cloud(&bytes)
}

/// Parse PLY bytes into a [`PointCloud`].
pub fn read_cloud(bytes: &[u8]) -> Result<PointCloud, SceneError> {
    let header = parse_header(bytes)?;
    let vi = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| header_err(1, "no vertex element"))?;
    if header.elements[..vi]
        .iter()
        .any(|e| e.count > 0 && e.has_list)
    {
        return Err(header_err(1, "elements with list properties before vertex"));
    }
    let vertex = &header.elements[vi];
    let has = |r: Role| vertex.props.iter().any(|p| p.role == r);
    for (role, name) in [(Role::X, "x"), (Role::Y, "y"), (Role::Z, "z")] {
        if !has(role) {
            return Err(SceneError::MissingProperty(name));
        }
    }
    let has_color = has(Role::Red) && has(Role::Green) && has(Role::Blue);
    let has_label = has(Role::Label);

    let n = vertex.count;
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut labels = has_label.then(|| Vec::with_capacity(n));

    let mut emit = |index: usize, offset: usize, values: &[f64]| -> Result<(), SceneError> {
        let mut p = Vector3::zeros();
        let mut c = DEFAULT_COLOR;
        let mut label = 0u32;
        for (prop, &v) in vertex.props.iter().zip(values) {
            match prop.role {
                Role::X => p.x = v,
                Role::Y => p.y = v,
                Role::Z => p.z = v,
                Role::Red => c[0] = v.clamp(0.0, 255.0) as u8,
                Role::Green => c[1] = v.clamp(0.0, 255.0) as u8,
                Role::Blue => c[2] = v.clamp(0.0, 255.0) as u8,
                Role::Label => {
                    if v < 0.0 || v.fract() != 0.0 {
                        return Err(SceneError::BadValue {
                            index,
                            offset,
                            message: format!("label {v} is not a non-negative integer"),
                        });
                    }
                    label = v as u32;
                }
                Role::Skip => {}
            }
        }
        if !p.iter().all(|v| v.is_finite()) {
            return Err(SceneError::NonFinite { index });
        }
        positions.push(p);
        colors.push(if has_color { c } else { DEFAULT_COLOR });
        if let Some(l) = labels.as_mut() {
            l.push(label);
        }
        Ok(())
    };

    let mut values = vec![0.0; vertex.props.len()];
    if header.binary {
        let skip: usize = header.elements[..vi]
            .iter()
            .map(|e| e.count * e.props.iter().map(|p| p.ty.size()).sum::<usize>())
            .sum();
        let stride: usize = vertex.props.iter().map(|p| p.ty.size()).sum();
        let start = header.len + skip;
        for index in 0..n {
            let offset = start + index * stride;
            let Some(record) = bytes.get(offset..offset + stride) else {
                return Err(SceneError::Truncated { index, offset });
            };
            let mut at = 0;
            for (prop, slot) in vertex.props.iter().zip(values.iter_mut()) {
                *slot = prop.ty.read_le(&record[at..]);
                at += prop.ty.size();
            }
            emit(index, offset, &values)?;
        }
    } else {
        let body = std::str::from_utf8(&bytes[header.len..]).map_err(|e| SceneError::BadValue {
            index: 0,
            offset: header.len + e.valid_up_to(),
            message: "ASCII payload is not valid UTF-8".into(),
        })?;
        let mut offset = header.len;
        let mut lines = body.split_inclusive('\n').filter_map(|line| {
            let at = offset;
            offset += line.len();
            let t = line.trim();
            (!t.is_empty()).then_some((at, t))
        });
        let skip: usize = header.elements[..vi].iter().map(|e| e.count).sum();
        for _ in 0..skip {
            if lines.next().is_none() {
                return Err(SceneError::Truncated {
                    index: 0,
                    offset: bytes.len(),
                });
            }
        }
        for index in 0..n {
            let Some((at, line)) = lines.next() else {
                return Err(SceneError::Truncated {
                    index,
                    offset: bytes.len(),
                });
            };
            let mut tokens = line.split_whitespace();
            for (prop, slot) in vertex.props.iter().zip(values.iter_mut()) {
                let tok = tokens.next().ok_or(SceneError::Truncated { index, offset: at })?;
                let bad = || SceneError::BadValue {
                    index,
                    offset: at,
                    message: format!("cannot parse `{tok}` as a number"),
                };
                *slot = match prop.ty {
                    ScalarType::F32 => f64::from(tok.parse::<f32>().map_err(|_| bad())?),
                    _ => tok.parse::<f64>().map_err(|_| bad())?,
                };
            }
            emit(index, at, &values)?;
        }
    }

    let mut class_names = Vec::new();
    if !header.class_names.is_empty() {
        let mut named = header.class_names;
        named.sort_by_key(|(id, _)| *id);
        for (expect, (id, name)) in named.into_iter().enumerate() {
            if id as usize != expect {
                return Err(header_err(1, format!("class ids not dense: expected {expect}, found {id}")));
            }
            class_names.push(name);
        }
    }
    PointCloud::new(positions, colors, labels, class_names)
}

fn f32_exact(v: f64) -> bool {
    f64::from(v as f32) == v
}

/// Write a cloud as PLY. Coordinates are written as `float` when every
/// coordinate is exactly representable in 32 bits, otherwise as `double`, so
/// a binary round trip is always lossless.
pub fn write_cloud(
    path: impl AsRef<Path>,
    cloud: &PointCloud,
    format: PlyFormat,
) -> Result<(), SceneError> {
    let path = path.as_ref();
    let io = |source| SceneError::Io {
        path: path.to_owned(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    write_cloud_to(&mut w, cloud, format).map_err(io)?;
    w.flush().map_err(io)
}

pub fn write_cloud_to(
    w: &mut impl Write,
    cloud: &PointCloud,
    format: PlyFormat,
) -> std::io::Result<()> {
    let single = cloud
        .positions()
        .iter()
        .all(|p| p.iter().all(|&c| f32_exact(c)));
    let coord_ty = if single { "float" } else { "double" };
    writeln!(w, "ply")?;
    match format {
        PlyFormat::Ascii => writeln!(w, "format ascii 1.0")?,
        PlyFormat::BinaryLittleEndian => writeln!(w, "format binary_little_endian 1.0")?,
    }
    let labels = cloud.labels();
    if labels.is_some() {
        for (i, name) in cloud.class_names().iter().enumerate() {
            writeln!(w, "comment class {i} {name}")?;
        }
    }
    writeln!(w, "element vertex {}", cloud.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(w, "property {coord_ty} {axis}")?;
    }
    for channel in ["red", "green", "blue"] {
        writeln!(w, "property uchar {channel}")?;
    }
    if labels.is_some() {
        writeln!(w, "property int label")?;
    }
    writeln!(w, "end_header")?;

    for (i, (p, c)) in cloud.positions().iter().zip(cloud.colors()).enumerate() {
        match format {
            PlyFormat::Ascii => {
                if single {
                    write!(w, "{} {} {}", p.x as f32, p.y as f32, p.z as f32)?;
                } else {
                    write!(w, "{} {} {}", p.x, p.y, p.z)?;
                }
                write!(w, " {} {} {}", c[0], c[1], c[2])?;
                if let Some(l) = labels {
                    write!(w, " {}", l[i])?;
                }
                writeln!(w)?;
            }
            PlyFormat::BinaryLittleEndian => {
                for &v in p.iter() {
                    if single {
                        w.write_all(&(v as f32).to_le_bytes())?;
                    } else {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                w.write_all(c)?;
                if let Some(l) = labels {
                    w.write_all(&(l[i] as i32).to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}
