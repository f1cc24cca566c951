//! Dataset unification onto the 133-point whole-body layout.
//!
//! Source annotations are remapped by declarative index tables, 2D sources get a fully
//! masked depth channel, and several corpora are mixed by weighted sampling.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth::RootRule;
use crate::error::{read_json, Error, Result};
use crate::simcc::{encode_pose_3d, SimCCLabelSpec, SimCCLabels};
use crate::types::{
    AnnotatedInstance, BBox, KeypointSchema, Pose, SchemaRegistry, Visibility, UNLABELED,
    WHOLEBODY, WHOLEBODY_SIZE,
};

/// On-disk form of a mapping table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingFile {
    pub source: String,
    #[serde(default)]
    pub notes: String,
    pub pairs: Vec<[usize; 2]>,
}

/// Source keypoint index → whole-body keypoint index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MappingFile", into = "MappingFile")]
pub struct SchemaMapping {
    source_schema: String,
    pairs: Vec<(usize, usize)>,
    notes: String,
}

impl TryFrom<MappingFile> for SchemaMapping {
    type Error = Error;

    fn try_from(f: MappingFile) -> Result<Self> {
        SchemaMapping::new(f.source, f.pairs.iter().map(|p| (p[0], p[1])).collect(), f.notes)
    }
}

impl From<SchemaMapping> for MappingFile {
    fn from(m: SchemaMapping) -> Self {
        MappingFile {
            source: m.source_schema,
            notes: m.notes,
            pairs: m.pairs.iter().map(|&(s, d)| [s, d]).collect(),
        }
    }
}

impl SchemaMapping {
    /// Checks target uniqueness and range. Source indices are checked against the source
    /// schema by [`SchemaMapping::check_source`].
    pub fn new(source_schema: impl Into<String>, pairs: Vec<(usize, usize)>, notes: impl Into<String>) -> Result<Self> {
        let mut seen = [false; WHOLEBODY_SIZE];
        let mut seen_src = BTreeMap::new();
        for &(s, d) in &pairs {
            if d >= WHOLEBODY_SIZE {
                return Err(Error::Mapping(format!(
                    "target index {d} out of range (target has {WHOLEBODY_SIZE} keypoints)"
                )));
            }
            if std::mem::replace(&mut seen[d], true) {
                return Err(Error::Mapping(format!("duplicate target {d}")));
            }
            if seen_src.insert(s, d).is_some() {
                return Err(Error::Mapping(format!("duplicate source {s}")));
            }
        }
        Ok(SchemaMapping {
            source_schema: source_schema.into(),
            pairs,
            notes: notes.into(),
        })
    }

    pub fn source_schema(&self) -> &str {
        &self.source_schema
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn notes(&self) -> &str {
        &self.notes
    }

    pub fn check_source(&self, schema: &KeypointSchema) -> Result<()> {
        if schema.name() != self.source_schema {
            return Err(Error::Mapping(format!(
                "mapping is for '{}', schema is '{}'",
                self.source_schema,
                schema.name()
            )));
        }
        if let Some(&(s, _)) = self.pairs.iter().find(|(s, _)| *s >= schema.size()) {
            return Err(Error::Mapping(format!(
                "source index {s} out of range ('{}' has {} keypoints)",
                schema.name(),
                schema.size()
            )));
        }
        Ok(())
    }

    pub fn coco17_to_wholebody() -> Self {
        builtin(include_str!("../data/map_coco17_to_wholebody.json"))
    }

    pub fn wholebody_identity() -> Self {
        builtin(include_str!("../data/map_wholebody_identity.json"))
    }

    pub fn synthetic3_to_wholebody() -> Self {
        builtin(include_str!("../data/map_synthetic3_to_wholebody.json"))
    }
}

fn builtin(text: &str) -> SchemaMapping {
    serde_json::from_str(text).expect("bundled mapping is valid")
}

/// Read and validate a mapping table. When the source schema is registered, source
/// indices are range-checked against it.
pub fn load_mapping(path: impl AsRef<Path>, registry: &SchemaRegistry) -> Result<SchemaMapping> {
    let path = path.as_ref();
    let file: MappingFile = read_json(path)?;
    let m = SchemaMapping::try_from(file)?;
    if let Some(schema) = registry.get(m.source_schema()) {
        m.check_source(schema)?;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Wholebody2d,
    Body2d,
    Face2d,
    Hand2d,
    Wholebody3d,
}

impl DatasetKind {
    pub fn has_depth(self) -> bool {
        self == DatasetKind::Wholebody3d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub name: String,
    pub kind: DatasetKind,
    pub mapping: SchemaMapping,
    pub sampling_weight: f64,
}

impl DatasetDescriptor {
    pub fn validate(&self) -> Result<()> {
        if !(self.sampling_weight > 0.0 && self.sampling_weight.is_finite()) {
            return Err(Error::invalid(format!(
                "dataset '{}': sampling weight must be positive, got {}",
                self.name, self.sampling_weight
            )));
        }
        Ok(())
    }
}

/// An instance on the whole-body layout with a depth channel and its mask.
///
/// `z` holds the source depth values as annotated (not yet root-relative); `z_weights[i]`
/// is 1 exactly where keypoint `i` carries a depth annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnifiedInstance {
    pub instance: AnnotatedInstance,
    pub z: Vec<f64>,
    pub z_weights: Vec<f64>,
}

impl UnifiedInstance {
    pub fn has_z(&self) -> Vec<bool> {
        self.z_weights.iter().map(|w| *w > 0.0).collect()
    }

    pub fn has_any_z(&self) -> bool {
        self.z_weights.iter().any(|w| *w > 0.0)
    }

    /// Depth offsets from the skeleton root in units of the bbox diagonal.
    /// `None` when no root can be resolved.
    pub fn normalized_root_relative_z(&self, rule: &RootRule) -> Option<Vec<f64>> {
        let diag = self.instance.bbox.diagonal();
        let rel = crate::depth::root_relative_z(&self.z, &self.has_z(), rule)?;
        Some(rel.into_iter().map(|v| v / diag).collect())
    }

    /// Training labels. Coordinates must already be in patch space. Depth targets are
    /// root-relative offsets normalized by the bbox diagonal; an unresolvable root masks
    /// the whole depth channel.
    pub fn labels(&self, spec: &SimCCLabelSpec, rule: &RootRule) -> SimCCLabels {
        let mut pose = self.instance.pose.clone();
        let has_z = self.has_z();
        let diag = self.instance.bbox.diagonal();
        pose.z = Some(self.z.iter().map(|v| v / diag).collect());
        encode_pose_3d(&pose, Some(&has_z), rule, spec)
    }
}

/// Remap a source instance onto the whole-body layout.
///
/// `has_z[i]` marks source keypoints with a depth annotation; depth values come from
/// `instance.pose.z`. Coordinates, depth and visibility of mapped keypoints are copied
/// unchanged; every other target slot is unlabeled with zero depth weight.
pub fn remap_instance(
    instance: &AnnotatedInstance,
    has_z: Option<&[bool]>,
    mapping: &SchemaMapping,
) -> Result<UnifiedInstance> {
    if instance.schema != mapping.source_schema {
        return Err(Error::Mapping(format!(
            "instance schema '{}' does not match mapping source '{}'",
            instance.schema, mapping.source_schema
        )));
    }
    let src = &instance.pose;
    if let Some(&(s, _)) = mapping.pairs.iter().find(|(s, _)| *s >= src.len()) {
        return Err(Error::Mapping(format!(
            "source index {s} out of range (instance has {} keypoints)",
            src.len()
        )));
    }
    let mut pose = Pose::unlabeled(WHOLEBODY_SIZE);
    let mut z = vec![0.0; WHOLEBODY_SIZE];
    let mut z_weights = vec![0.0; WHOLEBODY_SIZE];
    for &(s, d) in &mapping.pairs {
        pose.coords[d] = src.coords[s];
        pose.visibility[d] = src.visibility[s];
        if let Some(sc) = &src.scores {
            pose.scores.get_or_insert_with(|| vec![0.0; WHOLEBODY_SIZE])[d] = sc[s];
        }
        let annotated = has_z.is_some_and(|h| h.get(s).copied().unwrap_or(false));
        if let (true, Some(sz)) = (annotated, &src.z) {
            z[d] = sz[s];
            if src.visibility[s] != UNLABELED {
                z_weights[d] = 1.0;
            }
        }
    }
    pose.z = Some(z.clone());
    Ok(UnifiedInstance {
        instance: AnnotatedInstance {
            pose,
            schema: WHOLEBODY.to_string(),
            ..instance.clone()
        },
        z,
        z_weights,
    })
}

/// Zero the depth channel and its mask. x/y data is untouched.
pub fn inject_z_mask(mut u: UnifiedInstance) -> UnifiedInstance {
    u.z.iter_mut().for_each(|v| *v = 0.0);
    u.z_weights.iter_mut().for_each(|v| *v = 0.0);
    u.instance.pose.z = Some(u.z.clone());
    u
}

// ---------------------------------------------------------------------------------------
// COCO-style annotation files

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
    #[serde(default)]
    pub images: Vec<serde_json::Value>,
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    #[serde(default)]
    pub id: u64,
    pub image_id: u64,
    pub bbox: [f64; 4],
    pub area: f64,
    /// `[x, y, v]` per keypoint.
    pub keypoints: Vec<f64>,
    /// `[z, has_z]` per keypoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints_z: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_keypoints: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default = "default_category")]
    pub category_id: u64,
    #[serde(default)]
    pub iscrowd: u8,
}

fn default_category() -> u64 {
    1
}

/// An annotation converted to the domain types, with its depth mask when present.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceInstance {
    pub id: u64,
    pub instance: AnnotatedInstance,
    pub has_z: Option<Vec<bool>>,
    pub score: Option<f64>,
}

impl CocoAnnotation {
    pub fn to_instance(&self, schema: &str, dataset: &str) -> Result<SourceInstance> {
        let kp = &self.keypoints;
        if !kp.len().is_multiple_of(3) {
            return Err(Error::Schema(format!(
                "annotation {}: keypoints length {} is not a multiple of 3",
                self.id,
                kp.len()
            )));
        }
        let n = kp.len() / 3;
        let mut coords = Vec::with_capacity(n);
        let mut visibility = Vec::with_capacity(n);
        for c in kp.chunks_exact(3) {
            coords.push([c[0], c[1]]);
            let v = c[2];
            if !(v.fract() == 0.0 && (0.0..=255.0).contains(&v)) {
                return Err(Error::Schema(format!(
                    "annotation {}: visibility {v} is not a small integer",
                    self.id
                )));
            }
            visibility.push(v as Visibility);
        }
        let (z, has_z) = match &self.keypoints_z {
            Some(kz) => {
                if kz.len() != n {
                    return Err(Error::Schema(format!(
                        "annotation {}: {} depth entries for {n} keypoints",
                        self.id,
                        kz.len()
                    )));
                }
                (
                    Some(kz.iter().map(|p| p[0]).collect()),
                    Some(kz.iter().map(|p| p[1] > 0.0).collect()),
                )
            }
            None => (None, None),
        };
        let [x, y, w, h] = self.bbox;
        Ok(SourceInstance {
            id: self.id,
            instance: AnnotatedInstance {
                image_id: self.image_id,
                bbox: BBox { x, y, w, h },
                area: self.area,
                pose: Pose {
                    coords,
                    z,
                    visibility,
                    scores: None,
                },
                schema: schema.to_string(),
                dataset: dataset.to_string(),
            },
            has_z,
            score: self.score,
        })
    }

    pub fn from_unified(id: u64, u: &UnifiedInstance, score: Option<f64>) -> Self {
        let p = &u.instance.pose;
        let keypoints = p
            .coords
            .iter()
            .zip(&p.visibility)
            .flat_map(|(c, v)| [c[0], c[1], *v as f64])
            .collect();
        let keypoints_z = u.has_any_z().then(|| {
            u.z.iter()
                .zip(&u.z_weights)
                .map(|(z, w)| [*z, if *w > 0.0 { 1.0 } else { 0.0 }])
                .collect()
        });
        let b = &u.instance.bbox;
        CocoAnnotation {
            id,
            image_id: u.instance.image_id,
            bbox: [b.x, b.y, b.w, b.h],
            area: u.instance.area,
            keypoints,
            keypoints_z,
            num_keypoints: Some(p.num_labeled()),
            score,
            category_id: 1,
            iscrowd: 0,
        }
    }
}

pub fn read_coco(path: impl AsRef<Path>) -> Result<CocoFile> {
    read_json(path)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Convert every annotation of a COCO-style file onto the whole-body layout.
///
/// The source schema is the file's `schema` field, falling back to `default_schema`.
pub fn convert_file(file: &CocoFile, default_schema: &str, mapping: &SchemaMapping, dataset: &str) -> Result<CocoFile> {
    let schema = file.schema.as_deref().unwrap_or(default_schema);
    let mut out = Vec::with_capacity(file.annotations.len());
    for a in &file.annotations {
        let src = a.to_instance(schema, dataset)?;
        let u = remap_instance(&src.instance, src.has_z.as_deref(), mapping)?;
        out.push(CocoAnnotation::from_unified(a.id, &u, a.score));
    }
    Ok(CocoFile {
        schema: Some(WHOLEBODY.to_string()),
        images: file.images.clone(),
        annotations: out,
        categories: file.categories.clone(),
    })
}

// ---------------------------------------------------------------------------------------
// Mixed-corpus sampling

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub descriptor: DatasetDescriptor,
    pub instances: Vec<UnifiedInstance>,
}

/// Position of an instance within a list of corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DrawRef {
    pub dataset: usize,
    pub index: usize,
}

/// Endless deterministic stream of batches. Each draw picks a dataset with probability
/// proportional to its sampling weight, then takes that dataset's next instance from a
/// per-dataset shuffled epoch order.
#[derive(Debug, Clone)]
pub struct BatchStream {
    sizes: Vec<usize>,
    dist: WeightedIndex<f64>,
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    fn next_index(&mut self, d: usize) -> usize {
        if self.cursors[d] == self.orders[d].len() {
            self.orders[d] = (0..self.sizes[d]).collect();
            self.orders[d].shuffle(&mut self.rng);
            self.cursors[d] = 0;
        }
        let i = self.orders[d][self.cursors[d]];
        self.cursors[d] += 1;
        i
    }
}

impl Iterator for BatchStream {
    type Item = Vec<DrawRef>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut batch = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let d = self.dist.sample(&mut self.rng);
            let index = self.next_index(d);
            batch.push(DrawRef { dataset: d, index });
        }
        Some(batch)
    }
}

pub fn combined_batches(corpora: &[Corpus], batch_size: usize, seed: u64) -> Result<BatchStream> {
    if corpora.is_empty() {
        return Err(Error::invalid("no datasets to sample from"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    for c in corpora {
        c.descriptor.validate()?;
        if c.instances.is_empty() {
            return Err(Error::invalid(format!("dataset '{}' is empty", c.descriptor.name)));
        }
    }
    let weights: Vec<f64> = corpora.iter().map(|c| c.descriptor.sampling_weight).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::invalid(format!("sampling weights: {e}")))?;
    let sizes: Vec<usize> = corpora.iter().map(|c| c.instances.len()).collect();
    Ok(BatchStream {
        orders: sizes.iter().map(|_| Vec::new()).collect(),
        cursors: vec![0; sizes.len()],
        sizes,
        dist,
        batch_size,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn coco_instance(n_labeled: usize) -> AnnotatedInstance {
        let coords = (0..17).map(|i| [1.5 + i as f64 * 0.1, 2.25 + i as f64 / 3.0]).collect();
        let mut pose = Pose::visible(coords);
        for v in pose.visibility.iter_mut().skip(n_labeled) {
            *v = UNLABELED;
        }
        AnnotatedInstance {
            image_id: 3,
            bbox: BBox::new(0.0, 0.0, 30.0, 40.0).unwrap(),
            area: 1200.0,
            pose,
            schema: "coco-17".into(),
            dataset: "coco".into(),
        }
    }

    #[test]
    fn bundled_mappings() {
        let reg = SchemaRegistry::default();
        let m = SchemaMapping::coco17_to_wholebody();
        assert_eq!(m.pairs().len(), 17);
        assert!(m.pairs().iter().all(|(s, d)| s == d));
        m.check_source(reg.get("coco-17").unwrap()).unwrap();
        assert_eq!(SchemaMapping::wholebody_identity().pairs().len(), 133);
        assert_eq!(
            SchemaMapping::synthetic3_to_wholebody().pairs(),
            &[(0, 0), (1, 17), (2, 23)]
        );
    }

    #[test]
    fn load_mapping_errors() {
        let dir = tempfile::tempdir().unwrap();
        let reg = SchemaRegistry::default();
        let write = |name: &str, text: &str| {
            let p = dir.path().join(name);
            std::fs::write(&p, text).unwrap();
            p
        };
        let dup = write("dup.json", r#"{"source":"coco-17","pairs":[[0,5],[1,5]]}"#);
        let e = load_mapping(&dup, &reg).unwrap_err().to_string();
        assert!(e.contains("duplicate target 5"), "{e}");
        let range = write("range.json", r#"{"source":"coco-17","pairs":[[0,133]]}"#);
        assert!(load_mapping(&range, &reg).unwrap_err().to_string().contains("out of range"));
        let src = write("src.json", r#"{"source":"coco-17","pairs":[[17,40]]}"#);
        assert!(load_mapping(&src, &reg).is_err());
        let bad = write("bad.json", "{");
        assert!(load_mapping(&bad, &reg).is_err());
        let ok = write("ok.json", r#"{"source":"coco-17","pairs":[[0,0],[5,5]]}"#);
        assert_eq!(load_mapping(&ok, &reg).unwrap().pairs().len(), 2);
    }

    #[test]
    fn coco_remap() {
        let inst = coco_instance(17);
        let u = remap_instance(&inst, None, &SchemaMapping::coco17_to_wholebody()).unwrap();
        assert_eq!(u.instance.pose.len(), 133);
        assert_eq!(u.instance.pose.num_labeled(), 17);
        assert_eq!(u.instance.schema, WHOLEBODY);
        for i in 0..17 {
            assert_eq!(u.instance.pose.coords[i], inst.pose.coords[i]);
        }
        assert!(u.z_weights.iter().all(|w| *w == 0.0));
        // the unified instance no longer matches the mapping's source
        assert!(remap_instance(&u.instance, None, &SchemaMapping::coco17_to_wholebody()).is_err());
    }

    #[test]
    fn synthetic_remap() {
        let inst = AnnotatedInstance {
            schema: "synthetic-3".into(),
            pose: Pose::visible(vec![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]),
            ..coco_instance(0)
        };
        let u = remap_instance(&inst, None, &SchemaMapping::synthetic3_to_wholebody()).unwrap();
        let labeled: Vec<usize> = (0..133).filter(|&i| u.instance.pose.is_labeled(i)).collect();
        assert_eq!(labeled, vec![0, 17, 23]);
        assert_eq!(u.instance.pose.coords[23], [5.0, 6.0]);
    }

    #[test]
    fn depth_carried_and_masked() {
        let mut inst = coco_instance(17);
        inst.pose.z = Some((0..17).map(|i| 4.0 + i as f64).collect());
        let mut has = vec![true; 17];
        has[3] = false;
        let u = remap_instance(&inst, Some(&has), &SchemaMapping::coco17_to_wholebody()).unwrap();
        assert_eq!(u.z[5], 9.0);
        assert_eq!(u.z_weights[5], 1.0);
        assert_eq!(u.z_weights[3], 0.0);
        assert_eq!(u.z_weights[50], 0.0);
        let rel = u.normalized_root_relative_z(&RootRule::default()).unwrap();
        assert!(rel[11] < 0.0 && rel[12] > 0.0);

        let masked = inject_z_mask(u.clone());
        assert!(masked.z_weights.iter().all(|w| *w == 0.0));
        assert_eq!(masked.instance.pose.coords, u.instance.pose.coords);
        let spec = SimCCLabelSpec::new(48, 64);
        let a = u.labels(&spec, &RootRule::default());
        let b = masked.labels(&spec, &RootRule::default());
        assert_eq!(a.x_labels, b.x_labels);
        assert_eq!(a.y_labels, b.y_labels);
        assert!(b.z_weights.iter().all(|w| *w == 0.0));
    }

    #[test]
    fn coco_io_roundtrip() {
        let text = r#"{
            "images": [{"id": 3, "file_name": "a.jpg"}],
            "annotations": [{"id": 9, "image_id": 3, "bbox": [0, 0, 10, 20], "area": 150,
              "keypoints": [1, 2, 2, 3, 4, 0, 5, 6, 1],
              "keypoints_z": [[0.5, 1], [0, 0], [1.5, 1]]}]
        }"#;
        let f: CocoFile = serde_json::from_str(text).unwrap();
        let out = convert_file(&f, "synthetic-3", &SchemaMapping::synthetic3_to_wholebody(), "syn").unwrap();
        let a = &out.annotations[0];
        assert_eq!(a.keypoints.len(), 399);
        assert_eq!(&a.keypoints[69..72], &[5.0, 6.0, 1.0]);
        let kz = a.keypoints_z.as_ref().unwrap();
        assert_eq!(kz[0], [0.5, 1.0]);
        assert_eq!(kz[23], [1.5, 1.0]);
        assert_eq!(kz[17], [0.0, 0.0]);
        assert_eq!(out.images, f.images);
        let bad: CocoFile = serde_json::from_str(
            r#"{"annotations":[{"image_id":1,"bbox":[0,0,1,1],"area":1,"keypoints":[1,2]}]}"#,
        )
        .unwrap();
        assert!(convert_file(&bad, "synthetic-3", &SchemaMapping::synthetic3_to_wholebody(), "s").is_err());
    }

    fn corpus(name: &str, n: usize, weight: f64) -> Corpus {
        let u = remap_instance(&coco_instance(17), None, &SchemaMapping::coco17_to_wholebody()).unwrap();
        Corpus {
            descriptor: DatasetDescriptor {
                name: name.into(),
                kind: DatasetKind::Body2d,
                mapping: SchemaMapping::coco17_to_wholebody(),
                sampling_weight: weight,
            },
            instances: vec![u; n],
        }
    }

    #[test]
    fn single_dataset_epochs() {
        let c = [corpus("a", 10, 1.0)];
        let draws: Vec<usize> = combined_batches(&c, 5, 1)
            .unwrap()
            .take(6)
            .flatten()
            .map(|d| d.index)
            .collect();
        for epoch in draws.chunks(10) {
            let mut e = epoch.to_vec();
            e.sort();
            assert_eq!(e, (0..10).collect::<Vec<_>>());
        }
        assert_ne!(&draws[..10], &draws[10..20]);
    }

    #[test]
    fn weighted_ratio_and_determinism() {
        let c = [corpus("a", 7, 3.0), corpus("b", 5, 1.0)];
        let draws: Vec<DrawRef> = combined_batches(&c, 100, 42).unwrap().take(100).flatten().collect();
        let a = draws.iter().filter(|d| d.dataset == 0).count() as f64;
        let ratio = a / (draws.len() as f64 - a);
        assert!((ratio / 3.0 - 1.0).abs() <= 0.05, "ratio {ratio}");
        let again: Vec<DrawRef> = combined_batches(&c, 100, 42).unwrap().take(100).flatten().collect();
        assert_eq!(draws, again);
    }

    #[test]
    fn sampler_errors() {
        assert!(combined_batches(&[], 4, 0).is_err());
        assert!(combined_batches(&[corpus("a", 0, 1.0)], 4, 0).is_err());
        assert!(combined_batches(&[corpus("a", 3, 0.0)], 4, 0).is_err());
    }

    proptest! {
        #[test]
        fn labeled_count_matches_pairs(
            vis in prop::collection::vec(0u8..=2, 17),
            keep in prop::collection::vec(any::<bool>(), 17),
        ) {
            let mut inst = coco_instance(17);
            inst.pose.visibility = vis.clone();
            let pairs: Vec<(usize, usize)> = (0..17).filter(|i| keep[*i]).map(|i| (i, 132 - i)).collect();
            let m = SchemaMapping::new("coco-17", pairs.clone(), "").unwrap();
            let u = remap_instance(&inst, None, &m).unwrap();
            let want = pairs.iter().filter(|(s, _)| vis[*s] != UNLABELED).count();
            prop_assert_eq!(u.instance.pose.num_labeled(), want);
            for (s, d) in pairs {
                prop_assert_eq!(u.instance.pose.coords[d], inst.pose.coords[s]);
                prop_assert_eq!(u.instance.pose.visibility[d], vis[s]);
            }
        }
    }
}
