//! Dataset directory: `manifest.json` plus one `clip_<k>.bin` per clip.
//!
//! Each binary is the clip's arrays concatenated in the order listed under
//! `arrays` in its manifest entry, little-endian and row-major.

use std::fs;
use std::path::{Path, PathBuf};

use cointeract_core::blobworld::{generate_clip, ClipRecord, FrameBox, Frames, PixelBox, SceneSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Error;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

impl ArrayEntry {
    fn byte_len(&self) -> usize {
        let elem = if self.dtype == "f32" { 4 } else { 1 };
        self.shape.iter().product::<usize>() * elem
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Boxes {
    /// `[frame, x0, y0, x1, y1]`.
    pub head: Vec<[usize; 5]>,
    pub hand: Vec<[usize; 5]>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub id: usize,
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub n_motion: usize,
    pub dtype: String,
    pub boxes: Boxes,
    pub cond_dim: usize,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub clips: Vec<ClipEntry>,
}

pub fn clip_file(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("clip_{id}.bin"))
}

fn frames_entry(name: &str, f: &Frames) -> ArrayEntry {
    ArrayEntry { name: name.into(), dtype: "u8".into(), shape: f.shape().to_vec() }
}

fn encode_boxes(b: &[FrameBox]) -> Vec<[usize; 5]> {
    b.iter().map(|fb| [fb.frame, fb.bbox.x0, fb.bbox.y0, fb.bbox.x1, fb.bbox.y1]).collect()
}

fn decode_boxes(b: &[[usize; 5]]) -> Vec<FrameBox> {
    b.iter()
        .map(|&[frame, x0, y0, x1, y1]| FrameBox { frame, bbox: PixelBox { x0, y0, x1, y1 } })
        .collect()
}

/// Manifest entry and binary payload of one clip.
pub fn encode_clip(id: usize, clip: &ClipRecord) -> (ClipEntry, Vec<u8>) {
    let parts: [(&str, &Frames); 5] = [
        ("rgb", &clip.rgb_frames),
        ("hoi", &clip.hoi_frames),
        ("motion", &clip.motion_frames),
        ("ref_person", &clip.ref_person),
        ("ref_object", &clip.ref_object),
    ];
    let mut arrays = Vec::new();
    let mut bytes = Vec::new();
    for (name, f) in parts {
        arrays.push(frames_entry(name, f));
        bytes.extend_from_slice(&f.data);
    }
    arrays.push(ArrayEntry { name: "cond".into(), dtype: "f32".into(), shape: vec![clip.cond_vec.len()] });
    for v in &clip.cond_vec {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let fr = &clip.rgb_frames;
    let entry = ClipEntry {
        id,
        seed: clip.seed,
        frames: fr.n,
        height: fr.h,
        width: fr.w,
        n_motion: clip.motion_frames.n,
        dtype: "u8".into(),
        boxes: Boxes { head: encode_boxes(&clip.head_boxes), hand: encode_boxes(&clip.hand_boxes) },
        cond_dim: clip.cond_vec.len(),
        arrays,
    };
    (entry, bytes)
}

pub fn decode_clip(entry: &ClipEntry, bytes: &[u8]) -> Result<ClipRecord, Error> {
    let need: usize = entry.arrays.iter().map(ArrayEntry::byte_len).sum();
    if bytes.len() != need {
        return Err(Error::Format(format!("clip {}: expected {need} bytes, found {}", entry.id, bytes.len())));
    }
    let mut off = 0;
    let mut frames = std::collections::HashMap::new();
    let mut cond = Vec::new();
    for a in &entry.arrays {
        let chunk = &bytes[off..off + a.byte_len()];
        off += a.byte_len();
        match (a.dtype.as_str(), a.shape.as_slice()) {
            ("u8", &[n, h, w, 3]) => {
                frames.insert(a.name.as_str(), Frames { n, h, w, data: chunk.to_vec() });
            }
            ("f32", &[_]) => {
                cond = chunk.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            }
            _ => return Err(Error::Format(format!("clip {}: unsupported array {:?}", entry.id, a))),
        }
    }
    let mut take = |name: &str| {
        frames.remove(name).ok_or_else(|| Error::Format(format!("clip {}: missing array {name}", entry.id)))
    };
    Ok(ClipRecord {
        seed: entry.seed,
        rgb_frames: take("rgb")?,
        hoi_frames: take("hoi")?,
        motion_frames: take("motion")?,
        ref_person: take("ref_person")?,
        ref_object: take("ref_object")?,
        head_boxes: decode_boxes(&entry.boxes.head),
        hand_boxes: decode_boxes(&entry.boxes.hand),
        cond_vec: cond,
    })
}

pub fn write_dataset(dir: &Path, clips: &[ClipRecord]) -> Result<Manifest, Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest { version: MANIFEST_VERSION, clips: Vec::with_capacity(clips.len()) };
    for (id, clip) in clips.iter().enumerate() {
        let (entry, bytes) = encode_clip(id, clip);
        let path = clip_file(dir, id);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        manifest.clips.push(entry);
    }
    let path = dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<ClipRecord>), Error> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: Value = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    validate_manifest(&raw)?;
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::Format(e.to_string()))?;
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for entry in &manifest.clips {
        let p = clip_file(dir, entry.id);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        clips.push(decode_clip(entry, &bytes)?);
    }
    Ok((manifest, clips))
}

/// Structural schema check of a manifest document.
pub fn validate_manifest(doc: &Value) -> Result<(), Error> {
    let bad = |m: String| Err(Error::Format(format!("manifest: {m}")));
    let Some(obj) = doc.as_object() else { return bad("not an object".into()) };
    match obj.get("version").and_then(Value::as_u64) {
        Some(v) if v == MANIFEST_VERSION as u64 => {}
        other => return bad(format!("unsupported version {other:?}")),
    }
    let Some(clips) = obj.get("clips").and_then(Value::as_array) else { return bad("clips must be an array".into()) };
    for (k, c) in clips.iter().enumerate() {
        let Some(c) = c.as_object() else { return bad(format!("clip {k} is not an object")) };
        for key in ["id", "seed", "frames", "height", "width", "n_motion", "cond_dim"] {
            if c.get(key).and_then(Value::as_u64).is_none() {
                return bad(format!("clip {k}: {key} must be a non-negative integer"));
            }
        }
        if c.get("dtype").and_then(Value::as_str) != Some("u8") {
            return bad(format!("clip {k}: dtype must be \"u8\""));
        }
        let Some(boxes) = c.get("boxes").and_then(Value::as_object) else {
            return bad(format!("clip {k}: boxes must be an object"));
        };
        for key in ["head", "hand"] {
            let ok = boxes.get(key).and_then(Value::as_array).is_some_and(|list| {
                list.iter().all(|b| b.as_array().is_some_and(|b| b.len() == 5 && b.iter().all(|x| x.is_u64())))
            });
            if !ok {
                return bad(format!("clip {k}: boxes.{key} must be a list of [f, x0, y0, x1, y1]"));
            }
        }
        let arrays_ok = c.get("arrays").and_then(Value::as_array).is_some_and(|list| {
            list.iter().all(|a| {
                a.get("name").is_some_and(Value::is_string)
                    && matches!(a.get("dtype").and_then(Value::as_str), Some("u8" | "f32"))
                    && a.get("shape").and_then(Value::as_array).is_some_and(|s| s.iter().all(Value::is_u64))
            })
        });
        if !arrays_ok {
            return bad(format!("clip {k}: arrays must list {{name, dtype, shape}} entries"));
        }
    }
    Ok(())
}

pub fn generate_clips(spec: &SceneSpec, seeds: &[u64]) -> Result<Vec<ClipRecord>, Error> {
    seeds
        .iter()
        .map(|&s| generate_clip(&spec.with_seed(s)).map_err(|e| Error::Config(e.to_string())))
        .collect()
}
