//! Volume file formats.
//!
//! Two formats are supported:
//!
//! * **RawJson**: a JSON sidecar `{"dims":[nx,ny,nz],"spacing":[sx,sy,sz],"kind":"binary"|"labels"}`
//!   next to a headerless little-endian payload with the same stem and a `.raw`
//!   extension. Binary masks are stored as `u8`, label maps as `u16`.
//! * **NRRD** subset: `dimension: 3`, `encoding: raw`, little-endian, with
//!   spacing from a diagonal `space directions` matrix (or `spacings`). A
//!   `.nrrd` file carries its payload after the blank line ending the header;
//!   a `.nhdr` header points at a detached payload through `data file:`.
//!
//! Element type decides the volume kind for NRRD: `uint8` is a binary mask,
//! `uint16` a label map. `double`/`float` NRRDs load as real-valued fields.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Field, Grid, GridError, Volume, VolumeKind};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload has {actual} bytes, header implies {expected}")]
    DimsMismatch { expected: usize, actual: usize },
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("invalid volume: {0}")]
    Invalid(#[from] GridError),
    #[error("i/o failure on {path}: {source}")]
    IoFailure { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Nrrd,
    RawJson,
}

impl Format {
    /// Picks the format from a file extension (`.nrrd`/`.nhdr` vs `.json`/`.raw`).
    pub fn from_path(path: &Path) -> Option<Format> {
        match path.extension()?.to_str()? {
            "nrrd" | "nhdr" => Some(Format::Nrrd),
            "json" | "raw" => Some(Format::RawJson),
            _ => None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    dims: [usize; 3],
    spacing: [f64; 3],
    kind: VolumeKind,
}

fn read(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::IoFailure { path: path.to_owned(), source })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    fs::write(path, bytes).map_err(|source| IoError::IoFailure { path: path.to_owned(), source })
}

pub fn load_volume(path: &Path, format: Format) -> Result<Volume, IoError> {
    match format {
        Format::RawJson => load_raw_json(path),
        Format::Nrrd => match load_nrrd(path)? {
            Loaded::Volume(v) => Ok(v),
            Loaded::Field(_) => Err(IoError::UnsupportedEncoding(
                "floating-point NRRD cannot be loaded as a mask or label volume".into(),
            )),
        },
    }
}

/// Loads a volume, choosing the format from the extension.
pub fn load_volume_auto(path: &Path) -> Result<Volume, IoError> {
    let format = Format::from_path(path).ok_or_else(|| {
        IoError::UnsupportedEncoding(format!("unrecognised extension on {}", path.display()))
    })?;
    load_volume(path, format)
}

pub fn save_volume(v: &Volume, path: &Path, format: Format) -> Result<(), IoError> {
    match format {
        Format::RawJson => save_raw_json(v, path),
        Format::Nrrd => {
            let ty = match v.kind {
                VolumeKind::Binary => "uint8",
                VolumeKind::Labels => "uint16",
            };
            save_nrrd(path, &v.grid, ty, &encode_volume(v))
        }
    }
}

/// Real-valued field from a `double` or `float` NRRD, or any volume widened to f64.
pub fn load_field(path: &Path) -> Result<Field, IoError> {
    match Format::from_path(path) {
        Some(Format::Nrrd) => match load_nrrd(path)? {
            Loaded::Field(f) => Ok(f),
            Loaded::Volume(v) => Ok(Field::from_volume(&v)),
        },
        Some(Format::RawJson) => Ok(Field::from_volume(&load_raw_json(path)?)),
        None => Err(IoError::UnsupportedEncoding(format!(
            "unrecognised extension on {}",
            path.display()
        ))),
    }
}

/// Writes a field as a little-endian `double` NRRD.
pub fn save_field(f: &Field, path: &Path) -> Result<(), IoError> {
    let bytes: Vec<u8> = f.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    save_nrrd(path, &f.grid, "double", &bytes)
}

fn sidecar_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("raw"))
}

fn encode_volume(v: &Volume) -> Vec<u8> {
    match v.kind {
        VolumeKind::Binary => v.data.iter().map(|&x| x as u8).collect(),
        VolumeKind::Labels => v.data.iter().flat_map(|x| x.to_le_bytes()).collect(),
    }
}

fn decode_volume(grid: Grid, kind: VolumeKind, bytes: &[u8]) -> Result<Volume, IoError> {
    let width = match kind {
        VolumeKind::Binary => 1,
        VolumeKind::Labels => 2,
    };
    let expected = grid.len() * width;
    if bytes.len() != expected {
        return Err(IoError::DimsMismatch { expected, actual: bytes.len() });
    }
    let data = match kind {
        VolumeKind::Binary => bytes.iter().map(|&b| b as u16).collect(),
        VolumeKind::Labels => bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect(),
    };
    Ok(Volume::new(grid, kind, data)?)
}

fn load_raw_json(path: &Path) -> Result<Volume, IoError> {
    let (json_path, raw_path) = sidecar_paths(path);
    let text = read(&json_path)?;
    let sidecar: Sidecar = serde_json::from_slice(&text)
        .map_err(|e| IoError::MalformedHeader(format!("{}: {e}", json_path.display())))?;
    let grid = Grid::new(sidecar.dims, sidecar.spacing)?;
    decode_volume(grid, sidecar.kind, &read(&raw_path)?)
}

fn save_raw_json(v: &Volume, path: &Path) -> Result<(), IoError> {
    let (json_path, raw_path) = sidecar_paths(path);
    let sidecar = Sidecar { dims: v.grid.dims, spacing: v.grid.spacing, kind: v.kind };
    let text = serde_json::to_vec(&sidecar).expect("sidecar serializes");
    write(&json_path, &text)?;
    write(&raw_path, &encode_volume(v))
}

enum Loaded {
    Volume(Volume),
    Field(Field),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ElementType {
    U8,
    U16,
    F32,
    F64,
}

impl ElementType {
    fn parse(s: &str) -> Result<Self, IoError> {
        match s {
            "uchar" | "unsigned char" | "uint8" | "uint8_t" => Ok(Self::U8),
            "ushort" | "unsigned short" | "unsigned short int" | "uint16" | "uint16_t" => Ok(Self::U16),
            "float" => Ok(Self::F32),
            "double" => Ok(Self::F64),
            other => Err(IoError::UnsupportedEncoding(format!("element type `{other}`"))),
        }
    }

    fn width(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::U16 => 2,
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

struct NrrdHeader {
    element: ElementType,
    grid: Grid,
    data_file: Option<String>,
}

fn parse_vector(s: &str) -> Result<[f64; 3], IoError> {
    let inner = s
        .trim()
        .strip_prefix('(')
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(|| IoError::MalformedHeader(format!("bad direction vector `{s}`")))?;
    let parts: Vec<f64> = inner
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| IoError::MalformedHeader(format!("bad direction vector `{s}`")))?;
    <[f64; 3]>::try_from(parts)
        .map_err(|_| IoError::MalformedHeader(format!("direction vector `{s}` is not 3-D")))
}

fn spacing_from_directions(value: &str) -> Result<[f64; 3], IoError> {
    let vectors: Vec<&str> = value.split_whitespace().collect();
    if vectors.len() != 3 {
        return Err(IoError::MalformedHeader("space directions needs three vectors".into()));
    }
    let mut spacing = [0.0; 3];
    for (axis, v) in vectors.iter().enumerate() {
        let vec = parse_vector(v)?;
        for (k, &c) in vec.iter().enumerate() {
            if k != axis && c != 0.0 {
                return Err(IoError::UnsupportedEncoding(
                    "non-diagonal space directions are not supported".into(),
                ));
            }
        }
        spacing[axis] = vec[axis];
    }
    Ok(spacing)
}

fn parse_nrrd_header(text: &str) -> Result<NrrdHeader, IoError> {
    let mut lines = text.lines();
    let magic = lines.next().unwrap_or_default();
    if !magic.starts_with("NRRD000") {
        return Err(IoError::MalformedHeader("missing NRRD magic".into()));
    }
    let mut element = None;
    let mut dimension = None;
    let mut sizes = None;
    let mut spacing = None;
    let mut encoding = None;
    let mut endian = None;
    let mut data_file = None;
    for line in lines {
        if line.is_empty() {
            break;
        }
        if line.starts_with('#') || line.contains(":=") {
            continue;
        }
        let (key, value) = line
            .split_once(": ")
            .ok_or_else(|| IoError::MalformedHeader(format!("bad field line `{line}`")))?;
        let value = value.trim();
        match key {
            "type" => element = Some(ElementType::parse(value)?),
            "dimension" => dimension = value.parse::<usize>().ok(),
            "sizes" => {
                let s: Vec<usize> = value
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<Result<_, _>>()
                    .map_err(|_| IoError::MalformedHeader(format!("bad sizes `{value}`")))?;
                sizes = Some(s);
            }
            "space directions" => spacing = Some(spacing_from_directions(value)?),
            "spacings" => {
                let s: Vec<f64> = value
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<Result<_, _>>()
                    .map_err(|_| IoError::MalformedHeader(format!("bad spacings `{value}`")))?;
                spacing = Some(<[f64; 3]>::try_from(s).map_err(|_| {
                    IoError::MalformedHeader("spacings needs three values".into())
                })?);
            }
            "encoding" => encoding = Some(value.to_owned()),
            "endian" => endian = Some(value.to_owned()),
            "data file" | "datafile" => data_file = Some(value.to_owned()),
            _ => {}
        }
    }
    let element = element.ok_or_else(|| IoError::MalformedHeader("missing type".into()))?;
    if dimension != Some(3) {
        return Err(IoError::MalformedHeader("only dimension 3 is supported".into()));
    }
    let sizes = sizes.ok_or_else(|| IoError::MalformedHeader("missing sizes".into()))?;
    let dims = <[usize; 3]>::try_from(sizes)
        .map_err(|_| IoError::MalformedHeader("sizes needs three values".into()))?;
    match encoding.as_deref() {
        Some("raw") => {}
        Some(other) => return Err(IoError::UnsupportedEncoding(other.to_owned())),
        None => return Err(IoError::MalformedHeader("missing encoding".into())),
    }
    if element.width() > 1 {
        match endian.as_deref() {
            Some("little") => {}
            Some(other) => return Err(IoError::UnsupportedEncoding(format!("{other} endian"))),
            None => return Err(IoError::MalformedHeader("missing endian".into())),
        }
    }
    let spacing = spacing.unwrap_or([1.0; 3]);
    let grid = Grid::new(dims, spacing)?;
    Ok(NrrdHeader { element, grid, data_file })
}

fn load_nrrd(path: &Path) -> Result<Loaded, IoError> {
    let bytes = read(path)?;
    let header_end = find_header_end(&bytes);
    let header_text = std::str::from_utf8(&bytes[..header_end.unwrap_or(bytes.len())])
        .map_err(|_| IoError::MalformedHeader("header is not UTF-8".into()))?;
    let header = parse_nrrd_header(header_text)?;
    let payload = match &header.data_file {
        Some(name) => {
            let dir = path.parent().unwrap_or_else(|| Path::new("."));
            read(&dir.join(name))?
        }
        None => {
            let start = header_end
                .ok_or_else(|| IoError::MalformedHeader("header not terminated".into()))?;
            bytes[start..].to_vec()
        }
    };
    let grid = header.grid;
    match header.element {
        ElementType::U8 => Ok(Loaded::Volume(decode_volume(grid, VolumeKind::Binary, &payload)?)),
        ElementType::U16 => Ok(Loaded::Volume(decode_volume(grid, VolumeKind::Labels, &payload)?)),
        ElementType::F32 | ElementType::F64 => {
            let w = header.element.width();
            let expected = grid.len() * w;
            if payload.len() != expected {
                return Err(IoError::DimsMismatch { expected, actual: payload.len() });
            }
            let data = payload
                .chunks_exact(w)
                .map(|c| match w {
                    4 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                    _ => f64::from_le_bytes(c.try_into().unwrap()),
                })
                .collect();
            Ok(Loaded::Field(Field::new(grid, data)?))
        }
    }
}

/// Byte offset just past the blank line that ends the header.
fn find_header_end(bytes: &[u8]) -> Option<usize> {
    bytes.windows(2).position(|w| w == b"\n\n").map(|p| p + 2)
}

fn save_nrrd(path: &Path, grid: &Grid, ty: &str, payload: &[u8]) -> Result<(), IoError> {
    let [sx, sy, sz] = grid.spacing;
    let [nx, ny, nz] = grid.dims;
    let detached = path.extension().is_some_and(|e| e == "nhdr");
    let mut header = format!(
        "NRRD0004\n# bronchograph\ntype: {ty}\ndimension: 3\nspace dimension: 3\n\
         sizes: {nx} {ny} {nz}\nspace directions: ({sx},0,0) (0,{sy},0) (0,0,{sz})\n\
         encoding: raw\nendian: little\n"
    );
    if detached {
        let raw_path = path.with_extension("raw");
        let name = raw_path.file_name().expect("raw path has a file name").to_string_lossy();
        header.push_str(&format!("data file: {name}\n\n"));
        write(path, header.as_bytes())?;
        write(&raw_path, payload)
    } else {
        header.push('\n');
        let mut bytes = header.into_bytes();
        bytes.extend_from_slice(payload);
        write(path, &bytes)
    }
}
