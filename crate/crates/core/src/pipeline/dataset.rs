//! Dataset files: `header.json` plus one JSON record per line in
//! `records.ndjson`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::ConditionVector;
use crate::grouping::{DatasetIndex, DatasetItem};
use crate::kinematics::{BodyModel, ObjectTemplate, SceneParams, StickBodyModel};
use crate::optimizer::{MaskGrid, Observations};
use crate::projection::{rep25d_from_2d, CameraPose, Intrinsics, Keypoints2D};

pub const DATASET_FORMAT: &str = "hoi-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const HEADER_FILE: &str = "header.json";
pub const RECORDS_FILE: &str = "records.ndjson";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub body: StickBodyModel,
    pub object: ObjectTemplate,
    /// Human joint names followed by object keypoint names.
    pub keypoint_names: Vec<String>,
    pub mask_resolution: usize,
}

impl DatasetHeader {
    pub fn new(body: StickBodyModel, object: ObjectTemplate, mask_resolution: usize) -> Self {
        let mut keypoint_names = body.names.clone();
        keypoint_names
            .extend((0..object.keypoint_indices.len()).map(|i| format!("{}_{i}", object.name)));
        DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            body,
            object,
            keypoint_names,
            mask_resolution,
        }
    }

    pub fn n_human(&self) -> usize {
        self.body.joint_count()
    }

    pub fn n_object(&self) -> usize {
        self.object.keypoint_indices.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != DATASET_FORMAT || self.version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset {} v{}",
                self.format, self.version
            )));
        }
        self.object.validate()?;
        if self.keypoint_names.len() != self.n_human() + self.n_object() {
            return Err(Error::Format(
                "keypoint schema does not match the templates".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image_id: String,
    pub intrinsics: Intrinsics,
    /// Observing camera in the body-local frame.
    pub camera: CameraPose,
    pub human_keypoints: Keypoints2D,
    pub human_confidence: Vec<f64>,
    pub object_keypoints: Keypoints2D,
    pub object_confidence: Vec<f64>,
    pub person_mask: MaskGrid,
    pub object_mask: MaskGrid,
    pub condition: ConditionVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<SceneParams>,
    /// Starting estimate for refinement, when supplied by an external predictor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<SceneParams>,
}

impl DatasetRecord {
    pub fn validate(&self, header: &DatasetHeader) -> Result<()> {
        let (nh, no) = (header.n_human(), header.n_object());
        let check = |what, expected: usize, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    what,
                    expected,
                    got,
                })
            }
        };
        check("human keypoints", nh, self.human_keypoints.points.len())?;
        check("human confidence", nh, self.human_confidence.len())?;
        check("object keypoints", no, self.object_keypoints.points.len())?;
        check("object confidence", no, self.object_confidence.len())?;
        let r = header.mask_resolution;
        for m in [&self.person_mask, &self.object_mask] {
            check("mask width", r, m.width)?;
            check("mask height", r, m.height)?;
        }
        Ok(())
    }

    /// All keypoints, human first.
    pub fn keypoints(&self) -> Keypoints2D {
        Keypoints2D {
            points: self
                .human_keypoints
                .points
                .iter()
                .chain(&self.object_keypoints.points)
                .copied()
                .collect(),
        }
    }

    pub fn observations(&self) -> Observations {
        Observations {
            human_keypoints: self.human_keypoints.clone(),
            human_confidence: self.human_confidence.clone(),
            object_keypoints: self.object_keypoints.clone(),
            object_confidence: self.object_confidence.clone(),
            person_mask: self.person_mask.clone(),
            object_mask: self.object_mask.clone(),
            camera: self.camera,
            intrinsics: self.intrinsics,
            condition: self.condition.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        self.header.validate()?;
        let mut ids = std::collections::BTreeSet::new();
        for r in &self.records {
            r.validate(&self.header)?;
            if !ids.insert(r.image_id.as_str()) {
                return Err(Error::Format(format!("duplicate image id {}", r.image_id)));
            }
        }
        Ok(())
    }

    pub fn header_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.header)? + "\n")
    }

    pub fn records_ndjson(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(HEADER_FILE), self.header_json()?)?;
        let mut f = std::io::BufWriter::new(fs::File::create(dir.join(RECORDS_FILE))?);
        f.write_all(self.records_ndjson()?.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let header: DatasetHeader =
            serde_json::from_str(&fs::read_to_string(dir.join(HEADER_FILE))?)?;
        let header = DatasetHeader {
            body: StickBodyModel::from_json(&serde_json::to_string(&header.body)?)?,
            ..header
        };
        let reader = BufReader::new(fs::File::open(dir.join(RECORDS_FILE))?);
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::Format(format!("record {}: {e}", i + 1)))?,
            );
        }
        let ds = Dataset { header, records };
        ds.validate()?;
        Ok(ds)
    }

    /// Grouping input: rays from the observed keypoints.
    pub fn index(&self) -> DatasetIndex {
        DatasetIndex {
            items: self
                .records
                .iter()
                .map(|r| {
                    let keypoints = r.keypoints();
                    DatasetItem {
                        image_id: r.image_id.clone(),
                        rep: rep25d_from_2d(&keypoints, &r.camera, &r.intrinsics),
                        keypoints,
                        camera: r.camera,
                        intrinsics: r.intrinsics,
                    }
                })
                .collect(),
        }
    }
}
