//! Scene and image I/O: PLY point clouds and Gaussian exports, OBJ meshes,
//! PNG images, and raw float-plane dumps.
//!
//! All file formats are little-endian and `f32`-valued. Gaussian PLY files
//! store the raw (pre-activation) parameters so export → import round-trips
//! bit-exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Vector3, Vector4};

use crate::buffer::{Image, Plane};
use crate::error::GsError;
use crate::gaussians::GaussianCloud;

/// Property layout of an exported Gaussian: raw positions, log-scales,
/// quaternion, opacity logit, and color logits.
const GAUSSIAN_PROPS: [&str; 14] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
    "opacity", "r", "g", "b",
];

const RAW_MAGIC: &[u8; 8] = b"GSRAWF32";

#[derive(Clone, Copy, PartialEq, Eq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum PlyType {
    U8,
    I8,
    U16,
    I16,
    U32,
    I32,
    F32,
    F64,
}

impl PlyType {
    fn parse(word: &str) -> Option<PlyType> {
        Some(match word {
            "uchar" | "uint8" => PlyType::U8,
            "char" | "int8" => PlyType::I8,
            "ushort" | "uint16" => PlyType::U16,
            "short" | "int16" => PlyType::I16,
            "uint" | "uint32" => PlyType::U32,
            "int" | "int32" => PlyType::I32,
            "float" | "float32" => PlyType::F32,
            "double" | "float64" => PlyType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyType::U8 | PlyType::I8 => 1,
            PlyType::U16 | PlyType::I16 => 2,
            PlyType::U32 | PlyType::I32 | PlyType::F32 => 4,
            PlyType::F64 => 8,
        }
    }

    fn read_le(self, bytes: &[u8]) -> f64 {
        match self {
            PlyType::U8 => bytes[0] as f64,
            PlyType::I8 => bytes[0] as i8 as f64,
            PlyType::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            PlyType::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            PlyType::U32 => u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64,
            PlyType::I32 => i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64,
            PlyType::F32 => f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64,
            PlyType::F64 => f64::from_le_bytes([
                bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
            ]),
        }
    }
}

struct PlyVertexElement {
    format: PlyFormat,
    count: usize,
    properties: Vec<(PlyType, String)>,
    /// Vertex payload (binary) or vertex text lines (ASCII).
    body: Vec<u8>,
}

impl PlyVertexElement {
    fn property_index(&self, name: &str) -> Option<usize> {
        self.properties.iter().position(|(_, n)| n == name)
    }

    fn stride(&self) -> usize {
        self.properties.iter().map(|(t, _)| t.size()).sum()
    }

    fn offset_of(&self, index: usize) -> usize {
        self.properties[..index].iter().map(|(t, _)| t.size()).sum()
    }

    /// Reads one named column as f64s.
    fn column(&self, name: &str) -> Result<Vec<f64>, GsError> {
        let idx = self.property_index(name).ok_or_else(|| {
            GsError::UnsupportedFormat(format!("PLY vertex element lacks property '{name}'"))
        })?;
        let ty = self.properties[idx].0;
        let mut out = Vec::with_capacity(self.count);
        match self.format {
            PlyFormat::BinaryLe => {
                let stride = self.stride();
                let off = self.offset_of(idx);
                for v in 0..self.count {
                    let at = v * stride + off;
                    out.push(ty.read_le(&self.body[at..at + ty.size()]));
                }
            }
            PlyFormat::Ascii => {
                let text = std::str::from_utf8(&self.body)
                    .map_err(|_| GsError::UnsupportedFormat("PLY body is not UTF-8".into()))?;
                for (row, line) in text.lines().take(self.count).enumerate() {
                    let tok = line.split_whitespace().nth(idx).ok_or(GsError::Parse {
                        line: row + 1,
                        message: format!("missing column {idx} ('{name}')"),
                    })?;
                    out.push(tok.parse::<f64>().map_err(|e| GsError::Parse {
                        line: row + 1,
                        message: format!("bad float '{tok}': {e}"),
                    })?);
                }
            }
        }
        if out.len() != self.count {
            return Err(GsError::UnsupportedFormat(format!(
                "PLY vertex element truncated: {} of {} rows",
                out.len(),
                self.count
            )));
        }
        Ok(out)
    }
}

/// Parses the header and extracts the `vertex` element payload. Elements
/// after `vertex` (faces etc.) are ignored; list properties inside the
/// vertex element are unsupported.
fn read_ply_vertices(path: &Path) -> Result<PlyVertexElement, GsError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let header_end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| GsError::UnsupportedFormat("PLY missing end_header".into()))?
        + 11;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| GsError::UnsupportedFormat("PLY header is not UTF-8".into()))?;

    let mut format = None;
    let mut count = 0usize;
    let mut properties: Vec<(PlyType, String)> = Vec::new();
    let mut in_vertex = false;
    let mut seen_vertex = false;
    for (lineno, line) in header.lines().enumerate() {
        let mut words = line.split_whitespace();
        let Some(key) = words.next() else { continue };
        let err = |message: String| GsError::Parse {
            line: lineno + 1,
            message,
        };
        match key {
            "ply" | "comment" | "obj_info" | "end_header" => {}
            "format" => {
                format = Some(match words.next() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLe,
                    other => {
                        return Err(GsError::UnsupportedFormat(format!(
                            "PLY format {:?} (only ascii and binary_little_endian)",
                            other.unwrap_or("")
                        )))
                    }
                });
            }
            "element" => {
                let name = words.next().ok_or_else(|| err("element without name".into()))?;
                in_vertex = name == "vertex";
                if in_vertex {
                    seen_vertex = true;
                    count = words
                        .next()
                        .and_then(|w| w.parse().ok())
                        .ok_or_else(|| err("bad vertex count".into()))?;
                }
            }
            "property" if in_vertex => {
                let ty_word = words.next().ok_or_else(|| err("property without type".into()))?;
                if ty_word == "list" {
                    return Err(GsError::UnsupportedFormat(
                        "list properties in the vertex element".into(),
                    ));
                }
                let ty = PlyType::parse(ty_word)
                    .ok_or_else(|| err(format!("unknown property type '{ty_word}'")))?;
                let name = words.next().ok_or_else(|| err("property without name".into()))?;
                properties.push((ty, name.to_string()));
            }
            "property" => {}
            _ => return Err(err(format!("unexpected header keyword '{key}'"))),
        }
    }
    let format = format.ok_or_else(|| GsError::UnsupportedFormat("PLY without format line".into()))?;
    if !seen_vertex || properties.is_empty() {
        return Err(GsError::UnsupportedFormat("PLY without a vertex element".into()));
    }

    let body = match format {
        PlyFormat::BinaryLe => {
            let stride: usize = properties.iter().map(|(t, _)| t.size()).sum();
            let need = stride * count;
            if bytes.len() < header_end + need {
                return Err(GsError::UnsupportedFormat(format!(
                    "PLY binary payload too short: {} < {need} bytes",
                    bytes.len() - header_end
                )));
            }
            bytes[header_end..header_end + need].to_vec()
        }
        PlyFormat::Ascii => bytes[header_end..].to_vec(),
    };
    Ok(PlyVertexElement {
        format,
        count,
        properties,
        body,
    })
}

fn write_ply_header(
    w: &mut impl Write,
    binary: bool,
    count: usize,
    float_props: &[&str],
    comment: &str,
) -> std::io::Result<()> {
    writeln!(w, "ply")?;
    writeln!(
        w,
        "format {} 1.0",
        if binary { "binary_little_endian" } else { "ascii" }
    )?;
    writeln!(w, "comment {comment}")?;
    writeln!(w, "element vertex {count}")?;
    for p in float_props {
        writeln!(w, "property float {p}")?;
    }
    writeln!(w, "end_header")
}

fn write_ply_rows(
    w: &mut impl Write,
    binary: bool,
    rows: impl Iterator<Item = Vec<f32>>,
) -> std::io::Result<()> {
    for row in rows {
        if binary {
            for v in row {
                w.write_all(&v.to_le_bytes())?;
            }
        } else {
            let mut line = String::new();
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                line.push_str(&format!("{v}"));
            }
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
    }
    Ok(())
}

/// Exports raw Gaussian parameters (positions, log-scales, quaternion,
/// opacity logit, color logits) as a PLY vertex element.
pub fn write_gaussian_ply(
    path: impl AsRef<Path>,
    cloud: &GaussianCloud<f32>,
    binary: bool,
) -> Result<(), GsError> {
    cloud.validate_shape()?;
    let mut w = BufWriter::new(File::create(path)?);
    write_ply_header(&mut w, binary, cloud.len(), &GAUSSIAN_PROPS, "gaussian cloud")?;
    write_ply_rows(
        &mut w,
        binary,
        (0..cloud.len()).map(|i| {
            let p = cloud.positions[i];
            let s = cloud.log_scales[i];
            let q = cloud.rotations[i];
            let c = cloud.color_params[i];
            vec![
                p[0],
                p[1],
                p[2],
                s[0],
                s[1],
                s[2],
                q[0],
                q[1],
                q[2],
                q[3],
                cloud.opacity_logits[i],
                c[0],
                c[1],
                c[2],
            ]
        }),
    )?;
    w.flush()?;
    Ok(())
}

/// Reads a Gaussian cloud previously written by [`write_gaussian_ply`].
pub fn read_gaussian_ply(path: impl AsRef<Path>) -> Result<GaussianCloud<f32>, GsError> {
    let el = read_ply_vertices(path.as_ref())?;
    let mut cols = Vec::with_capacity(GAUSSIAN_PROPS.len());
    for name in GAUSSIAN_PROPS {
        cols.push(el.column(name)?);
    }
    let n = el.count;
    let at = |c: usize, i: usize| cols[c][i] as f32;
    let cloud = GaussianCloud {
        positions: (0..n).map(|i| Vector3::new(at(0, i), at(1, i), at(2, i))).collect(),
        log_scales: (0..n).map(|i| Vector3::new(at(3, i), at(4, i), at(5, i))).collect(),
        rotations: (0..n)
            .map(|i| Vector4::new(at(6, i), at(7, i), at(8, i), at(9, i)))
            .collect(),
        opacity_logits: (0..n).map(|i| at(10, i)).collect(),
        color_params: (0..n).map(|i| Vector3::new(at(11, i), at(12, i), at(13, i))).collect(),
        snapshot_positions: None,
    };
    cloud.validate_shape()?;
    Ok(cloud)
}

/// Writes a plain point cloud, optionally with `[0,1]` colors stored as the
/// conventional `uchar red/green/blue` properties.
pub fn write_point_cloud_ply(
    path: impl AsRef<Path>,
    points: &[Vector3<f32>],
    colors: Option<&[Vector3<f32>]>,
    binary: bool,
) -> Result<(), GsError> {
    if let Some(c) = colors {
        if c.len() != points.len() {
            return Err(GsError::ShapeMismatch(format!(
                "{} colors for {} points",
                c.len(),
                points.len()
            )));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(
        w,
        "format {} 1.0",
        if binary { "binary_little_endian" } else { "ascii" }
    )?;
    writeln!(w, "comment point cloud")?;
    writeln!(w, "element vertex {}", points.len())?;
    for p in ["x", "y", "z"] {
        writeln!(w, "property float {p}")?;
    }
    if colors.is_some() {
        for p in ["red", "green", "blue"] {
            writeln!(w, "property uchar {p}")?;
        }
    }
    writeln!(w, "end_header")?;
    for (i, p) in points.iter().enumerate() {
        let rgb = colors.map(|c| c[i].map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        if binary {
            for k in 0..3 {
                w.write_all(&p[k].to_le_bytes())?;
            }
            if let Some(rgb) = rgb {
                w.write_all(&[rgb[0], rgb[1], rgb[2]])?;
            }
        } else {
            let mut line = format!("{} {} {}", p[0], p[1], p[2]);
            if let Some(rgb) = rgb {
                line.push_str(&format!(" {} {} {}", rgb[0], rgb[1], rgb[2]));
            }
            writeln!(w, "{line}")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads positions and, when present, colors from a PLY point cloud.
/// `uchar` colors are rescaled to `[0,1]`; float colors pass through.
pub fn read_point_cloud_ply(
    path: impl AsRef<Path>,
) -> Result<(Vec<Vector3<f32>>, Option<Vec<Vector3<f32>>>), GsError> {
    let el = read_ply_vertices(path.as_ref())?;
    let xs = el.column("x")?;
    let ys = el.column("y")?;
    let zs = el.column("z")?;
    let points: Vec<Vector3<f32>> = (0..el.count)
        .map(|i| Vector3::new(xs[i] as f32, ys[i] as f32, zs[i] as f32))
        .collect();

    let color_names = [["red", "green", "blue"], ["r", "g", "b"]]
        .into_iter()
        .find(|names| names.iter().all(|n| el.property_index(n).is_some()));
    let colors = match color_names {
        None => None,
        Some(names) => {
            let scale = match el.properties[el.property_index(names[0]).unwrap()].0 {
                PlyType::U8 => 1.0 / 255.0,
                _ => 1.0,
            };
            let r = el.column(names[0])?;
            let g = el.column(names[1])?;
            let b = el.column(names[2])?;
            Some(
                (0..el.count)
                    .map(|i| {
                        Vector3::new(
                            (r[i] * scale) as f32,
                            (g[i] * scale) as f32,
                            (b[i] * scale) as f32,
                        )
                    })
                    .collect(),
            )
        }
    };
    Ok((points, colors))
}

/// Reads vertices and triangles from an OBJ file (`v` and `f` records only;
/// polygons are fan-triangulated, negative indices are relative).
pub fn read_obj(
    path: impl AsRef<Path>,
) -> Result<(Vec<Vector3<f32>>, Vec<[usize; 3]>), GsError> {
    let reader = BufReader::new(File::open(path)?);
    let mut vertices: Vec<Vector3<f32>> = Vec::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let err = |message: String| GsError::Parse {
            line: lineno + 1,
            message,
        };
        let mut words = line.split_whitespace();
        match words.next() {
            Some("v") => {
                let mut coords = [0.0f32; 3];
                for coord in coords.iter_mut() {
                    let tok = words.next().ok_or_else(|| err("vertex needs 3 coords".into()))?;
                    *coord = tok
                        .parse()
                        .map_err(|e| err(format!("bad coordinate '{tok}': {e}")))?;
                }
                vertices.push(Vector3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in words {
                    let first = tok.split('/').next().unwrap_or("");
                    let raw: i64 = first
                        .parse()
                        .map_err(|e| err(format!("bad face index '{tok}': {e}")))?;
                    let resolved = if raw > 0 {
                        (raw - 1) as usize
                    } else if raw < 0 {
                        let back = (-raw) as usize;
                        if back > vertices.len() {
                            return Err(err(format!("relative index {raw} out of range")));
                        }
                        vertices.len() - back
                    } else {
                        return Err(err("face index 0 is invalid".into()));
                    };
                    if resolved >= vertices.len() {
                        return Err(err(format!("face index {raw} out of range")));
                    }
                    idx.push(resolved);
                }
                if idx.len() < 3 {
                    return Err(err("face needs at least 3 vertices".into()));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    if vertices.is_empty() {
        return Err(GsError::empty("OBJ contains no vertices"));
    }
    Ok((vertices, triangles))
}

/// Writes an 8-bit RGB PNG; values are `round(255·clamp(v, 0, 1))`.
pub fn write_png(path: impl AsRef<Path>, image: &Image<f32>) -> Result<(), GsError> {
    let mut bytes = Vec::with_capacity(image.data.len() * 3);
    for px in &image.data {
        for k in 0..3 {
            bytes.push((px[k].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    image::save_buffer(
        path.as_ref(),
        &bytes,
        image.width as u32,
        image.height as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(())
}

/// Dumps same-sized scalar planes as raw little-endian f32: an 8-byte magic,
/// u32 height/width/channels, then each plane's row-major data in order.
pub fn write_raw_planes(
    path: impl AsRef<Path>,
    planes: &[&Plane<f32>],
) -> Result<(), GsError> {
    let Some(first) = planes.first() else {
        return Err(GsError::empty("no planes to write"));
    };
    if planes.iter().any(|p| p.width != first.width || p.height != first.height) {
        return Err(GsError::ShapeMismatch("planes differ in size".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(RAW_MAGIC)?;
    w.write_all(&(first.height as u32).to_le_bytes())?;
    w.write_all(&(first.width as u32).to_le_bytes())?;
    w.write_all(&(planes.len() as u32).to_le_bytes())?;
    for p in planes {
        for v in &p.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_raw_planes`].
pub fn read_raw_planes(path: impl AsRef<Path>) -> Result<Vec<Plane<f32>>, GsError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..8] != RAW_MAGIC {
        return Err(GsError::UnsupportedFormat("not a raw plane dump".into()));
    }
    let u = |at: usize| u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as usize;
    let (h, w, c) = (u(8), u(12), u(16));
    let need = 20 + 4 * h * w * c;
    if bytes.len() < need {
        return Err(GsError::UnsupportedFormat(format!(
            "raw dump truncated: {} < {need} bytes",
            bytes.len()
        )));
    }
    let mut planes = Vec::with_capacity(c);
    let mut at = 20;
    for _ in 0..c {
        let mut plane = Plane::zeros(w, h);
        for v in plane.data.iter_mut() {
            *v = f32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
            at += 4;
        }
        planes.push(plane);
    }
    Ok(planes)
}
