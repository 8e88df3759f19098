//! On-disk formats: labeled PLY clouds, scene directories and atomic writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::basis::LatentCode;
use crate::error::{Error, Result};
use crate::geometry::{Mat3, PointCloud, Sim3Transform, Vec3};
use crate::labeling::{Label, LabeledPointCloud, SymmetrySpec, DUST};
use crate::synth::SceneInstance;

/// Label value written to PLY files for dust points.
pub const PLY_DUST: i32 = -1;

pub const CLOUD_FILE: &str = "cloud.ply";
pub const GT_FILE: &str = "gt.json";

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(format!("not a file path: {}", path.display())))?;
    let tmp: PathBuf = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn label_to_ply(label: Label) -> Result<i32> {
    if label == DUST {
        return Ok(PLY_DUST);
    }
    i32::try_from(label).map_err(|_| Error::Format(format!("label {label} does not fit in int32")))
}

fn label_from_ply(value: i32) -> Result<Label> {
    match value {
        PLY_DUST => Ok(DUST),
        v if v >= 0 => Ok(v as Label),
        v => Err(Error::Format(format!("negative label {v}"))),
    }
}

/// Binary little-endian PLY with `x y z` as float32 and `label` as int32.
pub fn encode_ply(lc: &LabeledPointCloud) -> Result<Vec<u8>> {
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty int label\nend_header\n",
        lc.len()
    );
    let mut out = Vec::with_capacity(header.len() + 16 * lc.len());
    out.extend_from_slice(header.as_bytes());
    for (p, &l) in lc.points.iter().zip(&lc.labels) {
        for v in [p.x, p.y, p.z] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&label_to_ply(l)?.to_le_bytes());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
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
    fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            other => return Err(Error::Format(format!("unknown PLY type {other}"))),
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

    fn read(self, b: &[u8]) -> f64 {
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

/// Parses a binary little-endian PLY whose first element is `vertex` with
/// scalar properties including `x`, `y`, `z` and `label`. Any other vertex
/// properties are skipped; later elements are ignored.
pub fn decode_ply(bytes: &[u8]) -> Result<LabeledPointCloud> {
    const END: &[u8] = b"end_header\n";
    let header_len = bytes
        .windows(END.len())
        .position(|w| w == END)
        .map(|i| i + END.len())
        .ok_or_else(|| Error::Format("PLY header has no end_header".into()))?;
    let header =
        std::str::from_utf8(&bytes[..header_len]).map_err(|_| Error::Format("PLY header is not UTF-8".into()))?;
    let mut lines = header.lines().map(str::trim);
    if lines.next() != Some("ply") {
        return Err(Error::Format("missing PLY magic".into()));
    }

    let mut count: Option<usize> = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut in_vertex = false;
    for line in lines {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", other, ..] => return Err(Error::Format(format!("unsupported PLY format {other}"))),
            ["comment", ..] | ["obj_info", ..] | ["end_header"] | [] => {}
            ["element", name, n] => {
                if count.is_some() {
                    in_vertex = false;
                    continue;
                }
                if *name != "vertex" {
                    return Err(Error::Format(format!("first PLY element is {name}, expected vertex")));
                }
                count = Some(n.parse().map_err(|_| Error::Format(format!("bad vertex count {n}")))?);
                in_vertex = true;
            }
            ["property", "list", ..] if in_vertex => {
                return Err(Error::Format("list properties on vertices are not supported".into()))
            }
            ["property", ty, name] if in_vertex => props.push((name.to_string(), Scalar::parse(ty)?)),
            ["property", ..] => {}
            _ => return Err(Error::Format(format!("bad PLY header line: {line}"))),
        }
    }
    let count = count.ok_or_else(|| Error::Format("PLY has no vertex element".into()))?;

    let mut offset = 0;
    let mut layout = Vec::with_capacity(props.len());
    for (name, ty) in &props {
        layout.push((name.as_str(), *ty, offset));
        offset += ty.size();
    }
    let stride = offset;
    let find = |want: &str| {
        layout
            .iter()
            .find(|(n, _, _)| *n == want)
            .map(|&(_, ty, off)| (ty, off))
            .ok_or_else(|| Error::Format(format!("PLY vertex has no {want} property")))
    };
    let (x, y, z, label) = (find("x")?, find("y")?, find("z")?, find("label")?);
    if !matches!(
        label.0,
        Scalar::I8 | Scalar::I16 | Scalar::I32 | Scalar::U8 | Scalar::U16 | Scalar::U32
    ) {
        return Err(Error::Format("PLY label must be an integer type".into()));
    }

    let body = &bytes[header_len..];
    let needed = count
        .checked_mul(stride)
        .ok_or_else(|| Error::Format("PLY size overflow".into()))?;
    if body.len() < needed {
        return Err(Error::Format(format!(
            "PLY body has {} bytes, expected {needed}",
            body.len()
        )));
    }
    let mut points = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for row in body[..needed].chunks_exact(stride.max(1)).take(count) {
        let get = |(ty, off): (Scalar, usize)| ty.read(&row[off..]);
        points.push(Vec3::new(get(x), get(y), get(z)));
        let raw = get(label);
        let value = i32::try_from(raw as i64).map_err(|_| Error::Format(format!("label {raw} out of range")))?;
        labels.push(label_from_ply(value)?);
    }
    LabeledPointCloud::new(PointCloud::new(points), labels)
}

pub fn write_ply(path: &Path, lc: &LabeledPointCloud) -> Result<()> {
    write_atomic(path, &encode_ply(lc)?)
}

pub fn read_ply(path: &Path) -> Result<LabeledPointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode_ply(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Contents of a scene's `gt.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub category: String,
    pub seed: u64,
    pub z: Vec<f64>,
    pub scale: f64,
    /// Row-major rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub symmetry: SymmetrySpec,
    pub diameter: f64,
}

impl GroundTruth {
    pub fn of(scene: &SceneInstance) -> Self {
        let pose = &scene.gt_pose;
        Self {
            category: scene.category.clone(),
            seed: scene.seed,
            z: scene.gt_z.0.clone(),
            scale: pose.scale,
            rotation: std::array::from_fn(|i| pose.rotation[(i / 3, i % 3)]),
            translation: [pose.translation.x, pose.translation.y, pose.translation.z],
            symmetry: scene.symmetry.clone(),
            diameter: scene.diameter,
        }
    }

    pub fn latent(&self) -> LatentCode {
        LatentCode(self.z.clone())
    }

    pub fn pose(&self) -> Result<Sim3Transform> {
        Sim3Transform::new(
            self.scale,
            Mat3::from_row_slice(&self.rotation),
            Vec3::from(self.translation),
        )
    }
}

/// Writes `cloud.ply` (the labeled observation) and `gt.json` into `dir`.
pub fn write_scene_dir(dir: &Path, scene: &SceneInstance) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_ply(&dir.join(CLOUD_FILE), &scene.observation)?;
    write_json(&dir.join(GT_FILE), &GroundTruth::of(scene))
}

pub fn read_scene_dir(dir: &Path) -> Result<(LabeledPointCloud, GroundTruth)> {
    Ok((read_ply(&dir.join(CLOUD_FILE))?, read_json(&dir.join(GT_FILE))?))
}
