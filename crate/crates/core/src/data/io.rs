//! JSON-lines annotation and detection files, plus the patch sidecar.
//!
//! Annotation line:
//! `{"scene_id": str, "width": num, "height": num, "objects": [{"class": str, "bbox": [x1,y1,x2,y2]}], "features": {"<object-index>": [f64...]}}`
//! with `features` optional. Detection line:
//! `{"scene_id": str, "class": str, "score": f64, "bbox": [x1,y1,x2,y2]}`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnnotatedObject, BBox, ClassSplit, DataError, Dataset, Payload, Scene};
use crate::arrays::ArrayFile;
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct ObjectRecord {
    class: String,
    bbox: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneRecord {
    scene_id: String,
    width: f64,
    height: f64,
    objects: Vec<ObjectRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<BTreeMap<String, Vec<f64>>>,
}

/// A scored box, as produced by inference and consumed by evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub scene_id: String,
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectionRecord {
    scene_id: String,
    class: String,
    score: f64,
    bbox: [f64; 4],
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn patch_key(scene_id: &str, idx: usize) -> String {
    format!("patch/{scene_id}/{idx}")
}

/// Parses annotations; objects whose class is not in `split` are dropped and
/// counted in [`Dataset::dropped_objects`].
pub fn load_annotations(path: &Path, split: &ClassSplit) -> Result<Dataset, DataError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    parse_annotations(BufReader::new(f), split, None)
}

/// Like [`load_annotations`], attaching object patches from a sidecar file.
pub fn load_dataset(
    annotations: &Path,
    patches: &Path,
    split: &ClassSplit,
) -> Result<Dataset, DataError> {
    let store = ArrayFile::read(patches)?;
    let f = fs::File::open(annotations).map_err(io_err(annotations))?;
    parse_annotations(BufReader::new(f), split, Some(&store))
}

pub fn parse_annotations(
    reader: impl BufRead,
    split: &ClassSplit,
    patches: Option<&ArrayFile>,
) -> Result<Dataset, DataError> {
    let lookup: Option<BTreeMap<&str, &Tensor>> =
        patches.map(|p| p.arrays.iter().map(|(n, t)| (n.as_str(), t)).collect());
    let mut dataset = Dataset::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let (scene, dropped) = scene_from_record(rec, split, lookup.as_ref())?;
        dataset.dropped_objects += dropped;
        dataset.scenes.push(scene);
    }
    if dataset.dropped_objects > 0 {
        log::warn!(
            "dropped {} objects whose class is not in split {}",
            dataset.dropped_objects,
            split.name
        );
    }
    dataset.validate()?;
    Ok(dataset)
}

fn scene_from_record(
    rec: SceneRecord,
    split: &ClassSplit,
    patches: Option<&BTreeMap<&str, &Tensor>>,
) -> Result<(Scene, usize), DataError> {
    let fail = |message: String| DataError::Validation {
        scene_id: rec.scene_id.clone(),
        message,
    };
    let mut objects = Vec::new();
    let mut kept_source = Vec::new();
    let mut dropped = 0;
    for (idx, o) in rec.objects.iter().enumerate() {
        let bbox = BBox::from_array(o.bbox)
            .ok_or_else(|| fail(format!("object {idx}: invalid box {:?}", o.bbox)))?;
        match split.class_index(&o.class) {
            Some(class_id) => {
                objects.push(AnnotatedObject { class_id, bbox });
                kept_source.push(idx);
            }
            None => dropped += 1,
        }
    }
    let payload = if let Some(feats) = &rec.features {
        let mut out = Vec::with_capacity(kept_source.len());
        for &idx in &kept_source {
            let f = feats
                .get(&idx.to_string())
                .ok_or_else(|| fail(format!("object {idx}: missing feature vector")))?;
            out.push(f.clone());
        }
        Payload::Features(out)
    } else if let Some(store) = patches {
        let mut out = Vec::with_capacity(kept_source.len());
        let mut dim = None;
        for &idx in &kept_source {
            let key = patch_key(&rec.scene_id, idx);
            let t = store
                .get(key.as_str())
                .ok_or_else(|| fail(format!("missing patch array {key}")))?;
            let side = t.shape().first().copied().unwrap_or(0);
            if t.shape() != [side, side] || dim.is_some_and(|d| d != side) {
                return Err(fail(format!("patch {key} has shape {:?}", t.shape())));
            }
            dim = Some(side);
            out.push(t.data().to_vec());
        }
        match dim {
            Some(patch_dim) => Payload::Patches {
                patch_dim,
                patches: out,
            },
            None => Payload::None,
        }
    } else {
        Payload::None
    };
    let scene = Scene {
        scene_id: rec.scene_id,
        width: rec.width,
        height: rec.height,
        objects,
        payload,
    };
    scene.validate()?;
    Ok((scene, dropped))
}

fn scene_record(scene: &Scene, split: &ClassSplit) -> SceneRecord {
    let features = match &scene.payload {
        Payload::Features(f) => Some(
            f.iter()
                .enumerate()
                .map(|(i, v)| (i.to_string(), v.clone()))
                .collect(),
        ),
        _ => None,
    };
    SceneRecord {
        scene_id: scene.scene_id.clone(),
        width: scene.width,
        height: scene.height,
        objects: scene
            .objects
            .iter()
            .map(|o| ObjectRecord {
                class: split.class_name(o.class_id).to_string(),
                bbox: o.bbox.to_array(),
            })
            .collect(),
        features,
    }
}

pub fn write_annotations(path: &Path, dataset: &Dataset, split: &ClassSplit) -> Result<(), DataError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for scene in &dataset.scenes {
        let line = serde_json::to_string(&scene_record(scene, split)).expect("record serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Patch sidecar with arrays named `patch/<scene_id>/<idx>`.
pub fn patches_to_arrays(dataset: &Dataset) -> ArrayFile {
    let mut file = ArrayFile::new();
    for scene in &dataset.scenes {
        if let Payload::Patches { patch_dim, patches } = &scene.payload {
            for (i, p) in patches.iter().enumerate() {
                let t = Tensor::new(vec![*patch_dim, *patch_dim], p.clone()).expect("square patch");
                file.push(patch_key(&scene.scene_id, i), t);
            }
        }
    }
    file
}

pub fn write_patches(path: &Path, dataset: &Dataset) -> Result<(), DataError> {
    Ok(patches_to_arrays(dataset).write(path)?)
}

pub fn write_detections(path: &Path, dets: &[Detection], split: &ClassSplit) -> Result<(), DataError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for d in dets {
        let rec = DetectionRecord {
            scene_id: d.scene_id.clone(),
            class: split.class_name(d.class_id).to_string(),
            score: d.score,
            bbox: d.bbox.to_array(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes")).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_detections(path: &Path, split: &ClassSplit) -> Result<Vec<Detection>, DataError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| DataError::Parse { line: i + 1, message };
        let rec: DetectionRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        let class_id = split
            .class_index(&rec.class)
            .ok_or_else(|| parse(format!("unknown class {:?}", rec.class)))?;
        let bbox = BBox::from_array(rec.bbox).ok_or_else(|| parse(format!("invalid box {:?}", rec.bbox)))?;
        if !rec.score.is_finite() {
            return Err(parse("non-finite score".into()));
        }
        out.push(Detection {
            scene_id: rec.scene_id,
            class_id,
            score: rec.score,
            bbox,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::builtin_split;

    fn parse(text: &str, split: &ClassSplit) -> Result<Dataset, DataError> {
        parse_annotations(text.as_bytes(), split, None)
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let split = builtin_split("VOC-split1").unwrap();
        let d = parse("", &split).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.dropped_objects, 0);
    }

    #[test]
    fn resolves_class_names_base_first() {
        let split = builtin_split("VOC-split1").unwrap();
        let line = r#"{"scene_id":"a","width":100,"height":80,"objects":[{"class":"bus","bbox":[1,2,30,40]}]}"#;
        let d = parse(line, &split).unwrap();
        assert_eq!(d.scenes[0].objects[0].class_id, 16);
        assert_eq!(split.class_name(16), "bus");
    }

    #[test]
    fn unknown_classes_are_dropped_and_counted() {
        let split = builtin_split("IDD-OS").unwrap();
        let line = r#"{"scene_id":"a","width":100,"height":80,"objects":[{"class":"ufo","bbox":[1,2,30,40]},{"class":"car","bbox":[1,2,30,40]}]}"#;
        let d = parse(line, &split).unwrap();
        assert_eq!(d.dropped_objects, 1);
        assert_eq!(d.scenes[0].objects.len(), 1);
    }

    #[test]
    fn scenes_emptied_by_filtering_are_kept() {
        let split = builtin_split("IDD-OS").unwrap();
        let line = r#"{"scene_id":"a","width":100,"height":80,"objects":[{"class":"ufo","bbox":[1,2,30,40]}]}"#;
        let d = parse(line, &split).unwrap();
        assert_eq!(d.len(), 1);
        assert!(d.scenes[0].objects.is_empty());
    }

    #[test]
    fn inverted_box_names_scene() {
        let split = builtin_split("VOC-split1").unwrap();
        let text = format!(
            "{}\n{}",
            r#"{"scene_id":"ok","width":100,"height":80,"objects":[]}"#,
            r#"{"scene_id":"broken-7","width":100,"height":80,"objects":[{"class":"bus","bbox":[50,2,30,40]}]}"#
        );
        match parse(&text, &split) {
            Err(DataError::Validation { scene_id, .. }) => assert_eq!(scene_id, "broken-7"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let split = builtin_split("VOC-split1").unwrap();
        let text = "{\"scene_id\":\"a\",\"width\":1,\"height\":1,\"objects\":[]}\n\n{not json";
        match parse(text, &split) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn features_are_remapped_after_filtering() {
        let split = builtin_split("IDD-OS").unwrap();
        let line = r#"{"scene_id":"a","width":100,"height":80,"objects":[{"class":"ufo","bbox":[1,2,30,40]},{"class":"car","bbox":[1,2,30,40]}],"features":{"0":[9,9],"1":[1,2]}}"#;
        let d = parse(line, &split).unwrap();
        assert_eq!(d.scenes[0].payload, Payload::Features(vec![vec![1.0, 2.0]]));
    }

    #[test]
    fn detections_round_trip() {
        let split = builtin_split("IDD-OS").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dets.jsonl");
        let dets = vec![Detection {
            scene_id: "s1".into(),
            class_id: 12,
            score: 0.73,
            bbox: BBox::new(1.0, 2.0, 3.5, 4.25).unwrap(),
        }];
        write_detections(&path, &dets, &split).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"class\":\"water tanker\""));
        assert_eq!(read_detections(&path, &split).unwrap(), dets);
    }
}
