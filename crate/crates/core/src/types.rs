//! Shared domain types: keypoint schemas, poses, boxes and annotated instances.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_json, Error, Result};

/// Name of the canonical 133-point whole-body layout.
pub const WHOLEBODY: &str = "coco-wholebody-133";
pub const WHOLEBODY_SIZE: usize = 133;

/// OKS constant used for schemas that ship no sigma table.
pub const DEFAULT_SIGMA: f64 = 0.05;

const WHOLEBODY_JSON: &str = include_str!("../data/coco_wholebody_133.json");
const COCO17_JSON: &str = include_str!("../data/coco_17.json");
const SYNTHETIC3_JSON: &str = include_str!("../data/synthetic_3.json");

/// On-disk schema layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaFile {
    pub name: String,
    pub size: usize,
    pub parts: BTreeMap<String, [usize; 2]>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub groups: BTreeMap<String, Vec<String>>,
    pub sigmas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skeleton: Vec<[usize; 2]>,
}

/// A named keypoint layout with disjoint part slices and per-keypoint OKS constants.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSchema {
    name: String,
    size: usize,
    /// Sorted by start index.
    parts: Vec<(String, Range<usize>)>,
    /// Named unions of adjacent parts, e.g. `hand = left_hand + right_hand`.
    groups: Vec<(String, Vec<String>)>,
    sigmas: Vec<f64>,
    skeleton: Vec<[usize; 2]>,
}

impl KeypointSchema {
    pub fn from_file(file: SchemaFile) -> Result<Self> {
        let mut parts: Vec<(String, Range<usize>)> = file
            .parts
            .into_iter()
            .map(|(name, [s, e])| (name, s..e))
            .collect();
        parts.sort_by_key(|(_, r)| (r.start, r.end));

        let mut cursor = 0;
        for (name, r) in &parts {
            if r.start >= r.end {
                return Err(Error::Schema(format!("part '{name}' is empty")));
            }
            if r.start != cursor {
                return Err(Error::Schema(format!(
                    "part '{name}' starts at {} but previous parts end at {cursor} (parts must tile [0, size))",
                    r.start
                )));
            }
            cursor = r.end;
        }
        if cursor != file.size {
            return Err(Error::Schema(format!(
                "parts cover [0, {cursor}) but size is {}",
                file.size
            )));
        }
        if file.sigmas.len() != file.size {
            return Err(Error::Schema(format!(
                "{} sigmas for {} keypoints",
                file.sigmas.len(),
                file.size
            )));
        }
        if let Some(s) = file.sigmas.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Schema(format!("sigma {s} is not positive")));
        }
        for [a, b] in &file.skeleton {
            if *a >= file.size || *b >= file.size {
                return Err(Error::Schema(format!("skeleton edge ({a}, {b}) out of range")));
            }
        }

        let schema = KeypointSchema {
            name: file.name,
            size: file.size,
            parts,
            groups: file.groups.into_iter().collect(),
            sigmas: file.sigmas,
            skeleton: file.skeleton,
        };
        for (g, _) in &schema.groups {
            schema.group_range(g)?;
        }
        Ok(schema)
    }

    /// A schema with one part covering every keypoint and uniform sigmas.
    pub fn uniform(name: impl Into<String>, size: usize) -> Result<Self> {
        let mut parts = BTreeMap::new();
        parts.insert("all".to_string(), [0, size]);
        Self::from_file(SchemaFile {
            name: name.into(),
            size,
            parts,
            groups: BTreeMap::new(),
            sigmas: vec![DEFAULT_SIGMA; size],
            skeleton: vec![],
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_file(read_json(path)?)
    }

    pub fn wholebody() -> Self {
        builtin(WHOLEBODY_JSON)
    }

    pub fn coco17() -> Self {
        builtin(COCO17_JSON)
    }

    pub fn synthetic3() -> Self {
        builtin(SYNTHETIC3_JSON)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn skeleton(&self) -> &[[usize; 2]] {
        &self.skeleton
    }

    /// Declared parts in index order.
    pub fn parts(&self) -> impl Iterator<Item = (&str, Range<usize>)> {
        self.parts.iter().map(|(n, r)| (n.as_str(), r.clone()))
    }

    /// Index range of a declared part or part group.
    pub fn part_slice(&self, part: &str) -> Result<Range<usize>> {
        if let Some((_, r)) = self.parts.iter().find(|(n, _)| n == part) {
            return Ok(r.clone());
        }
        if self.groups.iter().any(|(g, _)| g == part) {
            return self.group_range(part);
        }
        let mut valid: Vec<String> = self.parts.iter().map(|(n, _)| n.clone()).collect();
        valid.extend(self.groups.iter().map(|(g, _)| g.clone()));
        Err(Error::UnknownPart {
            part: part.to_string(),
            valid,
        })
    }

    fn group_range(&self, group: &str) -> Result<Range<usize>> {
        let (_, members) = self
            .groups
            .iter()
            .find(|(g, _)| g == group)
            .ok_or_else(|| Error::Schema(format!("no group '{group}'")))?;
        let mut ranges = Vec::with_capacity(members.len());
        for m in members {
            let (_, r) = self
                .parts
                .iter()
                .find(|(n, _)| n == m)
                .ok_or_else(|| Error::Schema(format!("group '{group}' names unknown part '{m}'")))?;
            ranges.push(r.clone());
        }
        ranges.sort_by_key(|r| r.start);
        let first = ranges
            .first()
            .ok_or_else(|| Error::Schema(format!("group '{group}' is empty")))?;
        let mut end = first.end;
        for r in &ranges[1..] {
            if r.start != end {
                return Err(Error::Schema(format!("group '{group}' is not contiguous")));
            }
            end = r.end;
        }
        Ok(first.start..end)
    }

    pub fn to_file(&self) -> SchemaFile {
        SchemaFile {
            name: self.name.clone(),
            size: self.size,
            parts: self
                .parts
                .iter()
                .map(|(n, r)| (n.clone(), [r.start, r.end]))
                .collect(),
            groups: self.groups.iter().cloned().collect(),
            sigmas: self.sigmas.clone(),
            skeleton: self.skeleton.clone(),
        }
    }
}

fn builtin(json: &str) -> KeypointSchema {
    let file: SchemaFile = serde_json::from_str(json).expect("bundled schema parses");
    KeypointSchema::from_file(file).expect("bundled schema is valid")
}

/// Name-indexed set of schemas. Starts with the bundled layouts.
#[derive(Debug, Clone)]
pub struct SchemaRegistry {
    schemas: Vec<KeypointSchema>,
}

impl Default for SchemaRegistry {
    fn default() -> Self {
        SchemaRegistry {
            schemas: vec![
                KeypointSchema::wholebody(),
                KeypointSchema::coco17(),
                KeypointSchema::synthetic3(),
            ],
        }
    }
}

impl SchemaRegistry {
    pub fn empty() -> Self {
        SchemaRegistry { schemas: vec![] }
    }

    /// Insert or replace by name.
    pub fn insert(&mut self, schema: KeypointSchema) {
        self.schemas.retain(|s| s.name != schema.name);
        self.schemas.push(schema);
    }

    pub fn get(&self, name: &str) -> Option<&KeypointSchema> {
        self.schemas.iter().find(|s| s.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&KeypointSchema> {
        self.get(name)
            .ok_or_else(|| Error::UnknownSchema(name.to_string()))
    }

    /// Sigma table for `name`, falling back to a uniform table of `size` entries.
    pub fn sigmas_or_default(&self, name: &str, size: usize) -> Vec<f64> {
        match self.get(name) {
            Some(s) if s.size == size => s.sigmas.clone(),
            _ => {
                log::warn!("no sigma table for schema '{name}', using uniform {DEFAULT_SIGMA}");
                vec![DEFAULT_SIGMA; size]
            }
        }
    }
}

/// COCO visibility flag.
pub type Visibility = u8;
pub const UNLABELED: Visibility = 0;
pub const OCCLUDED: Visibility = 1;
pub const VISIBLE: Visibility = 2;

/// Keypoint set of one person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub coords: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<Vec<f64>>,
    pub visibility: Vec<Visibility>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

impl Pose {
    /// All keypoints labeled-visible.
    pub fn visible(coords: Vec<[f64; 2]>) -> Self {
        let n = coords.len();
        Pose {
            coords,
            z: None,
            visibility: vec![VISIBLE; n],
            scores: None,
        }
    }

    pub fn unlabeled(n: usize) -> Self {
        Pose {
            coords: vec![[0.0, 0.0]; n],
            z: None,
            visibility: vec![UNLABELED; n],
            scores: None,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn is_labeled(&self, i: usize) -> bool {
        self.visibility[i] > 0
    }

    pub fn num_labeled(&self) -> usize {
        self.visibility.iter().filter(|v| **v > 0).count()
    }

    /// Every violated invariant; never fails.
    pub fn violations(&self) -> Vec<Violation> {
        let n = self.coords.len();
        let mut out = Vec::new();
        if self.visibility.len() != n {
            out.push(Violation::LengthMismatch {
                field: "visibility",
                expected: n,
                found: self.visibility.len(),
            });
        }
        if let Some(z) = &self.z {
            if z.len() != n {
                out.push(Violation::LengthMismatch {
                    field: "z",
                    expected: n,
                    found: z.len(),
                });
            }
            if let Some(i) = z.iter().position(|v| !v.is_finite()) {
                out.push(Violation::NonFiniteDepth { index: i });
            }
        }
        if let Some(s) = &self.scores {
            if s.len() != n {
                out.push(Violation::LengthMismatch {
                    field: "scores",
                    expected: n,
                    found: s.len(),
                });
            }
        }
        for (i, c) in self.coords.iter().enumerate() {
            if !(c[0].is_finite() && c[1].is_finite()) {
                out.push(Violation::NonFiniteCoordinate { index: i });
            }
        }
        for (i, v) in self.visibility.iter().enumerate() {
            if *v > VISIBLE {
                out.push(Violation::VisibilityOutOfDomain { index: i, value: *v });
            }
        }
        out
    }
}

/// Axis-aligned box, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { x, y, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::invalid(format!("degenerate bbox {b:?}")))
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    pub fn center(&self) -> [f64; 2] {
        [self.x + 0.5 * self.w, self.y + 0.5 * self.h]
    }

    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Scale about the center.
    pub fn scaled(&self, factor: f64) -> BBox {
        let [cx, cy] = self.center();
        let (w, h) = (self.w * factor, self.h * factor);
        BBox {
            x: cx - 0.5 * w,
            y: cy - 0.5 * h,
            w,
            h,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedInstance {
    pub image_id: u64,
    pub bbox: BBox,
    pub area: f64,
    pub pose: Pose,
    pub schema: String,
    pub dataset: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonFiniteCoordinate { index: usize },
    NonFiniteDepth { index: usize },
    VisibilityOutOfDomain { index: usize, value: u8 },
    LengthMismatch {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    NonPositiveBBox,
    NonPositiveArea,
    UnknownSchema(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonFiniteCoordinate { index } => {
                write!(f, "non-finite coordinate (keypoint {index})")
            }
            Violation::NonFiniteDepth { index } => write!(f, "non-finite depth (keypoint {index})"),
            Violation::VisibilityOutOfDomain { index, value } => {
                write!(f, "visibility out of domain (keypoint {index}: {value})")
            }
            Violation::LengthMismatch {
                field,
                expected,
                found,
            } => write!(f, "length mismatch: {field} has {found}, expected {expected}"),
            Violation::NonPositiveBBox => write!(f, "non-positive bbox"),
            Violation::NonPositiveArea => write!(f, "non-positive area"),
            Violation::UnknownSchema(s) => write!(f, "unknown schema '{s}'"),
        }
    }
}

/// Check an instance against its schema. An empty list means the instance is well-formed.
pub fn validate(instance: &AnnotatedInstance, registry: &SchemaRegistry) -> Vec<Violation> {
    let mut out = instance.pose.violations();
    match registry.get(&instance.schema) {
        Some(schema) if schema.size() != instance.pose.len() => {
            out.push(Violation::LengthMismatch {
                field: "coords",
                expected: schema.size(),
                found: instance.pose.len(),
            });
        }
        Some(_) => {}
        None => out.push(Violation::UnknownSchema(instance.schema.clone())),
    }
    if !instance.bbox.is_valid() {
        out.push(Violation::NonPositiveBBox);
    }
    if !(instance.area > 0.0) {
        out.push(Violation::NonPositiveArea);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coco_instance() -> AnnotatedInstance {
        let coords = (0..17).map(|i| [10.0 + i as f64, 20.0 + 2.0 * i as f64]).collect();
        AnnotatedInstance {
            image_id: 1,
            bbox: BBox::new(5.0, 5.0, 40.0, 60.0).unwrap(),
            area: 2400.0,
            pose: Pose::visible(coords),
            schema: "coco-17".into(),
            dataset: "coco".into(),
        }
    }

    #[test]
    fn wholebody_parts() {
        let s = KeypointSchema::wholebody();
        assert_eq!(s.size(), 133);
        assert_eq!(s.part_slice("body").unwrap(), 0..17);
        assert_eq!(s.part_slice("foot").unwrap(), 17..23);
        assert_eq!(s.part_slice("face").unwrap(), 23..91);
        assert_eq!(s.part_slice("hand").unwrap(), 91..133);
        let total: usize = s.parts().map(|(_, r)| r.len()).sum();
        assert_eq!(total, 133);
        let names: Vec<_> = s.parts().map(|(n, _)| n).collect();
        assert_eq!(names, ["body", "foot", "face", "left_hand", "right_hand"]);
    }

    #[test]
    fn unknown_part_names_valid_parts() {
        let err = KeypointSchema::wholebody().part_slice("nose").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("nose"));
        assert!(msg.contains("body") && msg.contains("hand"));
    }

    #[test]
    fn distinct_parts_do_not_overlap() {
        let s = KeypointSchema::wholebody();
        let parts: Vec<_> = s.parts().collect();
        for (i, (_, a)) in parts.iter().enumerate() {
            for (_, b) in &parts[i + 1..] {
                assert!(a.end <= b.start || b.end <= a.start);
            }
        }
    }

    #[test]
    fn rejects_overlapping_or_gapped_parts() {
        let mut parts = BTreeMap::new();
        parts.insert("a".into(), [0, 3]);
        parts.insert("b".into(), [2, 4]);
        let file = SchemaFile {
            name: "bad".into(),
            size: 4,
            parts,
            groups: BTreeMap::new(),
            sigmas: vec![0.1; 4],
            skeleton: vec![],
        };
        assert!(KeypointSchema::from_file(file).is_err());

        let mut parts = BTreeMap::new();
        parts.insert("a".into(), [0, 4]);
        let file = SchemaFile {
            name: "bad".into(),
            size: 4,
            parts,
            groups: BTreeMap::new(),
            sigmas: vec![0.1, 0.1, 0.0, 0.1],
            skeleton: vec![],
        };
        assert!(KeypointSchema::from_file(file).is_err());
    }

    #[test]
    fn schema_file_roundtrip() {
        let s = KeypointSchema::wholebody();
        let back = KeypointSchema::from_file(s.to_file()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn validate_reports() {
        let reg = SchemaRegistry::default();
        let inst = coco_instance();
        assert!(validate(&inst, &reg).is_empty());

        let mut bad = inst.clone();
        bad.pose.visibility[3] = 5;
        let v = validate(&bad, &reg);
        assert_eq!(v.len(), 1);
        assert!(v[0].to_string().contains("visibility out of domain"));

        let mut bad = inst.clone();
        bad.pose.coords[0][0] = f64::NAN;
        let v = validate(&bad, &reg);
        assert!(v[0].to_string().contains("non-finite coordinate"));

        let mut bad = inst;
        bad.bbox.w = 0.0;
        bad.area = -1.0;
        bad.pose.visibility.pop();
        bad.schema = "coco-wholebody-133".into();
        let v = validate(&bad, &reg);
        assert!(v.contains(&Violation::NonPositiveBBox));
        assert!(v.contains(&Violation::NonPositiveArea));
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn sigma_fallback() {
        let reg = SchemaRegistry::default();
        assert_eq!(reg.sigmas_or_default("coco-17", 17)[0], 0.026);
        assert_eq!(reg.sigmas_or_default("mystery", 4), vec![DEFAULT_SIGMA; 4]);
    }
}
