//! On-disk frame datasets and replay streams.
//!
//! A dataset is a JSON manifest plus, per frame, binary depth, embedding and
//! optional mask files and text pose and intrinsics files. Paths inside a
//! manifest are relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::binio::{Precision, Reader, Writer};
use super::{write_atomic, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::geometry::Bounds;
use crate::ingest::{CameraFrame, CameraIntrinsics, CameraPose, DepthImage, DynamicMask, EmbeddingGrid};
use crate::online::StreamStep;

pub const DEPTH_MAGIC: &[u8; 4] = b"LMDP";
pub const FEATURE_MAGIC: &[u8; 4] = b"LMFT";
pub const MASK_MAGIC: &[u8; 4] = b"LMMK";

pub const MANIFEST_FILE: &str = "dataset.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFrame {
    pub id: String,
    pub split: Split,
    pub frame: CameraFrame,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Scene bounds suggested by the producer, if any.
    pub bounds: Option<Bounds>,
    pub frames: Vec<DatasetFrame>,
}

impl Dataset {
    pub fn get(&self, id: &str) -> Option<&DatasetFrame> {
        self.frames.iter().find(|f| f.id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetFrame> {
        self.frames.iter().filter(move |f| f.split == split)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub id: String,
    pub split: Split,
    pub depth: String,
    pub embeddings: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    /// Text file with the row-major 4x4 camera-to-world matrix.
    pub pose: String,
    /// Text file `fx fy cx cy patch_stride`.
    pub intrinsics: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Bounds>,
    pub frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamEntry {
    /// Frame id, or `null` when no frame arrived at this step.
    pub frame: Option<String>,
    #[serde(default)]
    pub grasping: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamManifest {
    pub version: u32,
    /// Dataset manifest path, relative to the stream manifest.
    pub dataset: String,
    pub steps: Vec<StreamEntry>,
}

pub fn depth_to_bytes(d: &DepthImage) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(DEPTH_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(d.rows as u32);
    w.u32(d.cols as u32);
    w.floats(&d.data, Precision::F32);
    w.finish_with_checksum()
}

/// Non-finite depths are kept; ingest treats them as invalid pixels.
pub fn depth_from_bytes(bytes: &[u8]) -> Result<DepthImage> {
    let mut r = Reader::new(bytes, "depth file");
    r.magic(DEPTH_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let rows = r.u32()? as u64;
    let cols = r.u32()? as u64;
    let data = r.raw_floats(rows * cols, Precision::F32)?;
    r.checksum()?;
    DepthImage::new(rows as usize, cols as usize, data)
}

pub fn embeddings_to_bytes(e: &EmbeddingGrid) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(FEATURE_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(e.rows as u32);
    w.u32(e.cols as u32);
    w.u32(e.dim as u32);
    w.floats(&e.data, Precision::F32);
    w.finish_with_checksum()
}

pub fn embeddings_from_bytes(bytes: &[u8]) -> Result<EmbeddingGrid> {
    let mut r = Reader::new(bytes, "embedding file");
    r.magic(FEATURE_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let rows = r.u32()? as u64;
    let cols = r.u32()? as u64;
    let dim = r.u32()? as u64;
    let data = r.floats(rows * cols * dim, Precision::F32)?;
    r.checksum()?;
    EmbeddingGrid::new(rows as usize, cols as usize, dim as usize, data)
}

pub fn mask_to_bytes(m: &DynamicMask) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MASK_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(m.rows as u32);
    w.u32(m.cols as u32);
    w.bytes(&m.data);
    w.finish_with_checksum()
}

pub fn mask_from_bytes(bytes: &[u8]) -> Result<DynamicMask> {
    let mut r = Reader::new(bytes, "mask file");
    r.magic(MASK_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let rows = r.u32()? as u64;
    let cols = r.u32()? as u64;
    let n = r.ensure(rows * cols, 1)?;
    let data = r.take(n)?.to_vec();
    r.checksum()?;
    DynamicMask::new(rows as usize, cols as usize, data)
}

/// 16 values, one matrix row per line, in shortest round-trip notation.
pub fn pose_to_text(pose: &CameraPose) -> String {
    pose.to_matrix4()
        .chunks(4)
        .map(|row| row.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ") + "\n")
        .collect()
}

pub fn pose_from_text(text: &str) -> Result<CameraPose> {
    let values = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| Error::InvalidFrame(format!("pose value {t:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let m: [f64; 16] = values
        .as_slice()
        .try_into()
        .map_err(|_| Error::InvalidFrame(format!("pose needs 16 values, found {}", values.len())))?;
    CameraPose::from_matrix4(&m)
}

pub fn intrinsics_to_text(k: &CameraIntrinsics) -> String {
    format!("{:?} {:?} {:?} {:?} {}\n", k.fx, k.fy, k.cx, k.cy, k.patch_stride)
}

pub fn intrinsics_from_text(text: &str) -> Result<CameraIntrinsics> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let [fx, fy, cx, cy, stride] = tokens.as_slice() else {
        return Err(Error::InvalidFrame(format!(
            "intrinsics need 5 values (fx fy cx cy patch_stride), found {}",
            tokens.len()
        )));
    };
    let float = |t: &str| {
        t.parse::<f64>()
            .map_err(|e| Error::InvalidFrame(format!("intrinsics value {t:?}: {e}")))
    };
    let k = CameraIntrinsics {
        fx: float(fx)?,
        fy: float(fy)?,
        cx: float(cx)?,
        cy: float(cy)?,
        patch_stride: stride
            .parse()
            .map_err(|e| Error::InvalidFrame(format!("patch_stride {stride:?}: {e}")))?,
    };
    k.validate()?;
    Ok(k)
}

fn parse_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads a file and tags decode failures with its path.
fn read_with<T>(path: &Path, decode: impl FnOnce(&[u8]) -> Result<T>) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| parse_error(path, e.to_string()))?;
    decode(&bytes).map_err(|e| parse_error(path, e.to_string()))
}

fn read_text_with<T>(path: &Path, decode: impl FnOnce(&str) -> Result<T>) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| parse_error(path, e.to_string()))?;
    decode(&text).map_err(|e| parse_error(path, e.to_string()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| parse_error(path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| parse_error(path, e.to_string()))
}

fn check_version(path: &Path, version: u32) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(parse_error(
            path,
            format!("unsupported manifest version {version} (supported: {FORMAT_VERSION})"),
        ));
    }
    Ok(())
}

/// Writes frames under `dir` (created if missing) and returns the manifest path.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("frames"))?;
    let mut entries = Vec::with_capacity(dataset.frames.len());
    for f in &dataset.frames {
        let stem = format!("frames/{}", f.id);
        let depth = format!("{stem}.depth");
        let embeddings = format!("{stem}.feat");
        let pose = format!("{stem}.pose");
        let intrinsics = format!("{stem}.intr");
        write_atomic(&dir.join(&pose), pose_to_text(&f.frame.pose).as_bytes())?;
        write_atomic(
            &dir.join(&intrinsics),
            intrinsics_to_text(&f.frame.intrinsics).as_bytes(),
        )?;
        write_atomic(&dir.join(&depth), &depth_to_bytes(&f.frame.depth))?;
        write_atomic(&dir.join(&embeddings), &embeddings_to_bytes(&f.frame.embeddings))?;
        let mask = match &f.frame.dynamic_mask {
            Some(m) => {
                let name = format!("{stem}.mask");
                write_atomic(&dir.join(&name), &mask_to_bytes(m))?;
                Some(name)
            }
            None => None,
        };
        entries.push(FrameEntry {
            id: f.id.clone(),
            split: f.split,
            depth,
            embeddings,
            mask,
            pose,
            intrinsics,
        });
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        bounds: dataset.bounds,
        frames: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

/// Accepts either a manifest path or a directory containing `dataset.json`.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let manifest: DatasetManifest = read_json(&manifest_path)?;
    check_version(&manifest_path, manifest.version)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for e in manifest.frames {
        if frames.iter().any(|f: &DatasetFrame| f.id == e.id) {
            return Err(parse_error(&manifest_path, format!("duplicate frame id {:?}", e.id)));
        }
        let frame = CameraFrame {
            depth: read_with(&base.join(&e.depth), depth_from_bytes)?,
            embeddings: read_with(&base.join(&e.embeddings), embeddings_from_bytes)?,
            pose: read_text_with(&base.join(&e.pose), pose_from_text)?,
            intrinsics: read_text_with(&base.join(&e.intrinsics), intrinsics_from_text)?,
            dynamic_mask: match &e.mask {
                Some(m) => Some(read_with(&base.join(m), mask_from_bytes)?),
                None => None,
            },
        };
        frame
            .validate()
            .map_err(|err| parse_error(&manifest_path, format!("frame {:?}: {err}", e.id)))?;
        frames.push(DatasetFrame {
            id: e.id,
            split: e.split,
            frame,
        });
    }
    Ok(Dataset {
        bounds: manifest.bounds,
        frames,
    })
}

pub fn write_stream(path: &Path, manifest: &StreamManifest) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(manifest)?.as_bytes())
}

/// Loads a stream manifest and resolves every frame id against its dataset.
pub fn read_stream(path: &Path) -> Result<Vec<StreamStep>> {
    let manifest: StreamManifest = read_json(path)?;
    check_version(path, manifest.version)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let dataset = read_dataset(&base.join(&manifest.dataset))?;
    manifest
        .steps
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let frame = match s.frame {
                Some(id) => {
                    let f = dataset
                        .get(&id)
                        .ok_or_else(|| parse_error(path, format!("step {i}: unknown frame id {id:?}")))?;
                    Some((id, f.frame.clone()))
                }
                None => None,
            };
            Ok(StreamStep {
                frame,
                grasping: s.grasping,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame() -> CameraFrame {
        CameraFrame {
            depth: DepthImage::new(2, 2, vec![1.0, f64::NAN, 0.0, 2.5]).unwrap(),
            embeddings: EmbeddingGrid::new(1, 1, 2, vec![0.6, 0.8]).unwrap(),
            pose: CameraPose::from_translation([0.1, 0.2, 0.3]),
            intrinsics: CameraIntrinsics {
                fx: 2.0,
                fy: 2.0,
                cx: 1.0,
                cy: 1.0,
                patch_stride: 2,
            },
            dynamic_mask: Some(DynamicMask::new(1, 1, vec![1]).unwrap()),
        }
    }

    #[test]
    fn dataset_and_stream_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset {
            bounds: Some(Bounds::new([0.0; 3], [1.0; 3]).unwrap()),
            frames: vec![DatasetFrame {
                id: "a".into(),
                split: Split::Train,
                frame: frame(),
            }],
        };
        let manifest = write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.bounds, ds.bounds);
        let (f, g) = (&back.frames[0].frame, &ds.frames[0].frame);
        assert!(f.depth.data[1].is_nan());
        assert_eq!(f.depth.data[3], 2.5);
        assert_eq!(f.dynamic_mask, g.dynamic_mask);
        assert_eq!(f.pose, g.pose);
        assert_eq!(f.intrinsics, g.intrinsics);

        let stream = dir.path().join("stream.json");
        write_stream(
            &stream,
            &StreamManifest {
                version: FORMAT_VERSION,
                dataset: manifest.file_name().unwrap().to_string_lossy().into(),
                steps: vec![
                    StreamEntry {
                        frame: Some("a".into()),
                        grasping: false,
                    },
                    StreamEntry {
                        frame: None,
                        grasping: true,
                    },
                ],
            },
        )
        .unwrap();
        let steps = read_stream(&stream).unwrap();
        assert_eq!(steps.len(), 2);
        assert_eq!(steps[0].frame.as_ref().unwrap().0, "a");
        assert!(steps[1].frame.is_none() && steps[1].grasping);
    }

    #[test]
    fn text_sidecars_round_trip_exactly() {
        let pose = CameraPose::from_matrix4(&[
            0.0,
            -1.0,
            0.0,
            0.1 + 0.2,
            1.0,
            0.0,
            0.0,
            -3.25,
            0.0,
            0.0,
            1.0,
            1e-17,
            0.0,
            0.0,
            0.0,
            1.0,
        ])
        .unwrap();
        assert_eq!(pose_from_text(&pose_to_text(&pose)).unwrap(), pose);
        let k = frame().intrinsics;
        assert_eq!(intrinsics_from_text(&intrinsics_to_text(&k)).unwrap(), k);
        assert!(intrinsics_from_text("1 2 3 4").is_err());
        assert!(intrinsics_from_text("1 2 3 4 x").is_err());
        assert!(pose_from_text("1 0 0 0").is_err());
    }

    #[test]
    fn unknown_frame_in_stream_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(
            dir.path(),
            &Dataset {
                bounds: None,
                frames: vec![],
            },
        )
        .unwrap();
        let stream = dir.path().join("s.json");
        fs::write(
            &stream,
            r#"{"version":1,"dataset":"dataset.json","steps":[{"frame":"zz"}]}"#,
        )
        .unwrap();
        assert!(matches!(read_stream(&stream), Err(Error::Parse { .. })));
    }
}
