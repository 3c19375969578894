//! Sequence containers: `manifest.json`, `frame_%04d.cwkt` (float-32) and
//! `label_%04d.cwkt` (unsigned-8, 255 = ignore).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use clockwork_core::data::{LabeledSequence, Provenance};
use clockwork_core::tensor::MAX_CLASSES;
use serde::{Deserialize, Serialize};

use crate::cwkt::{array_to_labels, array_to_tensor, labels_to_array, tensor_to_array, CwktArray};
use crate::error::{CwkError, Result};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "cwk-sequence";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub format: String,
    pub version: u32,
    pub n_frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub provenance: ProvenanceManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceManifest {
    pub generator: String,
    pub seed: Option<u64>,
    pub params: BTreeMap<String, String>,
}

pub fn frame_name(t: usize) -> String {
    format!("frame_{t:04}.cwkt")
}

pub fn label_name(t: usize) -> String {
    format!("label_{t:04}.cwkt")
}

pub fn write_sequence(seq: &LabeledSequence, dir: &Path) -> Result<SequenceManifest> {
    if seq.n_classes > MAX_CLASSES {
        return Err(CwkError::usage(format!(
            "{} classes do not fit unsigned-8 labels (at most {MAX_CLASSES})",
            seq.n_classes
        )));
    }
    let first = seq
        .frames
        .first()
        .ok_or_else(|| CwkError::usage("cannot write an empty sequence"))?;
    fs::create_dir_all(dir).map_err(|e| CwkError::io(dir, e))?;
    for (t, (frame, labels)) in seq.frames.iter().zip(&seq.labels).enumerate() {
        tensor_to_array(frame)?.write(&dir.join(frame_name(t)))?;
        labels_to_array(labels)?.write(&dir.join(label_name(t)))?;
    }
    let (channels, height, width) = first.dims();
    let manifest = SequenceManifest {
        format: FORMAT.into(),
        version: 1,
        n_frames: seq.frames.len(),
        channels,
        height,
        width,
        n_classes: seq.n_classes,
        provenance: ProvenanceManifest {
            generator: seq.provenance.generator.clone(),
            seed: seq.provenance.seed,
            params: seq.provenance.params.clone(),
        },
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| CwkError::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<SequenceManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CwkError::io(&path, e))?;
    let manifest: SequenceManifest =
        serde_json::from_str(&text).map_err(|e| CwkError::format(&path, e.to_string()))?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(CwkError::format(
            &path,
            format!("not a v1 {FORMAT} manifest"),
        ));
    }
    if manifest.n_classes > MAX_CLASSES {
        return Err(CwkError::format(
            &path,
            format!("{} classes exceed unsigned-8 labels", manifest.n_classes),
        ));
    }
    Ok(manifest)
}

fn count_files(dir: &Path, prefix: &str) -> Result<usize> {
    let entries = fs::read_dir(dir).map_err(|e| CwkError::io(dir, e))?;
    let mut n = 0;
    for entry in entries {
        let name = entry.map_err(|e| CwkError::io(dir, e))?.file_name();
        let name = name.to_string_lossy();
        if name.starts_with(prefix) && name.ends_with(".cwkt") {
            n += 1;
        }
    }
    Ok(n)
}

pub fn read_sequence(dir: &Path) -> Result<LabeledSequence> {
    let manifest = read_manifest(dir)?;
    let mpath = dir.join(MANIFEST);
    for prefix in ["frame_", "label_"] {
        let present = count_files(dir, prefix)?;
        if present != manifest.n_frames {
            return Err(CwkError::format(
                &mpath,
                format!(
                    "manifest lists {} frames, found {present} {prefix}*.cwkt files",
                    manifest.n_frames
                ),
            ));
        }
    }
    let mut frames = Vec::with_capacity(manifest.n_frames);
    let mut labels = Vec::with_capacity(manifest.n_frames);
    for t in 0..manifest.n_frames {
        let fpath = dir.join(frame_name(t));
        let frame = array_to_tensor(&CwktArray::read(&fpath)?, &fpath)?;
        if frame.dims() != (manifest.channels, manifest.height, manifest.width) {
            return Err(CwkError::format(
                &fpath,
                format!("dims {:?} differ from manifest", frame.dims()),
            ));
        }
        let lpath = dir.join(label_name(t));
        let l = array_to_labels(&CwktArray::read(&lpath)?, &lpath)?;
        frames.push(frame);
        labels.push(l);
    }
    let p = manifest.provenance;
    let provenance = Provenance {
        generator: p.generator,
        seed: p.seed,
        params: p.params,
    };
    LabeledSequence::new(frames, labels, manifest.n_classes, provenance)
        .map_err(|e| CwkError::format(mpath, e.to_string()))
}
