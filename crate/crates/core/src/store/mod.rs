//! Descriptor, local feature, label and ground-truth collections and their file formats.
//!
//! Binary formats (all integers and floats little-endian):
//!
//! ```text
//! GDS1: "GDS1" | dim: u32 | count: u64 | count x (id_len: u16 | id | dim x f32)
//! GLF1: "GLF1" | dim: u32 | images: u64 | per image:
//!       id_len: u16 | id | n: u32 | n x (x: f32 | y: f32 | dim x f32)
//! ```
//!
//! Text formats are CSV with a fixed header: `id,landmark_id` for labels and
//! `id,images` for ground truth and submissions.

mod binary;
mod tables;

use std::borrow::Borrow;
use std::collections::{BTreeSet, HashMap};
use std::fmt;

use crate::error::{Error, Result};
use crate::graph::Role;

pub use binary::{
    load_descriptors, load_local_features, read_descriptors, read_local_features,
    save_descriptors, save_local_features, write_descriptors, write_local_features,
};
pub use tables::{
    load_ground_truth, load_labels, load_submission, read_ground_truth, read_labels,
    read_submission, save_ground_truth, save_labels, save_submission, write_ground_truth,
    write_labels, write_submission, Submission, SUBMISSION_LIMIT,
};

/// Reserved prefix for synthetic label-hub vertices; never valid for an image.
pub const HUB_PREFIX: &str = "#label:";

/// Norm tolerance past which a descriptor is renormalized on load.
pub const NORM_TOLERANCE: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ImageId(String);

impl ImageId {
    pub fn new(token: impl Into<String>) -> Result<Self> {
        let token = token.into();
        if token.is_empty() {
            return Err(Error::validation("image id is empty"));
        }
        if token.chars().any(char::is_whitespace) {
            return Err(Error::validation(format!("image id {token:?} contains whitespace")));
        }
        if token.starts_with(HUB_PREFIX) {
            return Err(Error::validation(format!(
                "image id {token:?} uses the reserved prefix {HUB_PREFIX:?}"
            )));
        }
        Ok(ImageId(token))
    }

    /// Builds the vertex id of a label hub. Only the graph layer does this.
    pub(crate) fn hub(label: Label) -> Self {
        ImageId(format!("{HUB_PREFIX}{}", label.0))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_hub(&self) -> bool {
        self.0.starts_with(HUB_PREFIX)
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Borrow<str> for ImageId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl TryFrom<&str> for ImageId {
    type Error = Error;

    fn try_from(value: &str) -> Result<Self> {
        ImageId::new(value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label(pub u64);

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

pub fn l2_norm(values: &[f32]) -> f32 {
    values.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt() as f32
}

/// Scales `values` to unit length. Fails on a zero vector.
pub fn normalize_in_place(values: &mut [f32]) -> Result<()> {
    let norm = values.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::validation("cannot normalize a zero or non-finite vector"));
    }
    for v in values.iter_mut() {
        *v = (*v as f64 / norm) as f32;
    }
    Ok(())
}

/// Global descriptors of one image collection, stored row-major in insertion order.
#[derive(Clone, Debug)]
pub struct DescriptorSet {
    dim: usize,
    role: Role,
    ids: Vec<ImageId>,
    values: Vec<f32>,
    lookup: HashMap<ImageId, usize>,
}

impl DescriptorSet {
    pub fn new(dim: usize, role: Role) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("descriptor dimension must be positive"));
        }
        if !matches!(role, Role::Query | Role::Index | Role::Train) {
            return Err(Error::validation(format!("descriptor sets cannot have role {role:?}")));
        }
        Ok(DescriptorSet {
            dim,
            role,
            ids: Vec::new(),
            values: Vec::new(),
            lookup: HashMap::new(),
        })
    }

    pub fn from_rows<I, S>(dim: usize, role: Role, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: AsRef<str>,
    {
        let mut set = DescriptorSet::new(dim, role)?;
        for (id, values) in rows {
            set.push(ImageId::new(id.as_ref())?, &values)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, id: ImageId, values: &[f32]) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::validation(format!(
                "descriptor for {id} has length {}, expected {}",
                values.len(),
                self.dim
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::validation(format!("descriptor for {id} has non-finite component {bad}")));
        }
        if self.lookup.contains_key(&id) {
            return Err(Error::validation(format!("duplicate image id {id}")));
        }
        self.lookup.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.values.extend_from_slice(values);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ImageId] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> &ImageId {
        &self.ids[row]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.values[row * self.dim..(row + 1) * self.dim]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f32] {
        let dim = self.dim;
        &mut self.values[row * dim..(row + 1) * dim]
    }

    /// Flat row-major component buffer.
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|row| self.row(row))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.lookup.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ImageId, &[f32])> + '_ {
        self.ids.iter().zip(self.values.chunks_exact(self.dim))
    }

    /// Renormalizes every row whose norm is off by more than [`NORM_TOLERANCE`].
    /// Returns how many rows were touched.
    pub fn normalize(&mut self) -> Result<usize> {
        let mut touched = 0;
        for (values, id) in self.values.chunks_exact_mut(self.dim).zip(&self.ids) {
            if (l2_norm(values) - 1.0).abs() > NORM_TOLERANCE {
                normalize_in_place(values)
                    .map_err(|_| Error::validation(format!("descriptor for {id} has zero norm")))?;
                touched += 1;
            }
        }
        Ok(touched)
    }

    /// The same rows under a different role tag.
    pub fn with_role(mut self, role: Role) -> Result<Self> {
        if !matches!(role, Role::Query | Role::Index | Role::Train) {
            return Err(Error::validation(format!("descriptor sets cannot have role {role:?}")));
        }
        self.role = role;
        Ok(self)
    }
}

/// Bitwise equality: components compare as raw 32-bit patterns.
impl PartialEq for DescriptorSet {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.role == other.role
            && self.ids == other.ids
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Keypoints of one image: pixel coordinates plus a local descriptor each.
#[derive(Clone, Debug)]
pub struct Keypoints {
    dim: usize,
    points: Vec<[f32; 2]>,
    descs: Vec<f32>,
}

impl Keypoints {
    pub fn new(dim: usize) -> Self {
        Keypoints {
            dim,
            points: Vec::new(),
            descs: Vec::new(),
        }
    }

    pub fn push(&mut self, x: f32, y: f32, desc: &[f32]) -> Result<()> {
        if desc.len() != self.dim {
            return Err(Error::validation(format!(
                "local descriptor has length {}, expected {}",
                desc.len(),
                self.dim
            )));
        }
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::validation(format!("keypoint coordinate ({x}, {y}) is not finite")));
        }
        if desc.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("local descriptor has a non-finite component"));
        }
        self.points.push([x, y]);
        self.descs.extend_from_slice(desc);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> [f32; 2] {
        self.points[i]
    }

    pub fn desc(&self, i: usize) -> &[f32] {
        &self.descs[i * self.dim..(i + 1) * self.dim]
    }
}

impl PartialEq for Keypoints {
    fn eq(&self, other: &Self) -> bool {
        let bits = |a: &f32, b: &f32| a.to_bits() == b.to_bits();
        self.dim == other.dim
            && self.points.len() == other.points.len()
            && self
                .points
                .iter()
                .zip(&other.points)
                .all(|(a, b)| bits(&a[0], &b[0]) && bits(&a[1], &b[1]))
            && self.descs.iter().zip(&other.descs).all(|(a, b)| bits(a, b))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalFeatureSet {
    dim: usize,
    images: Vec<(ImageId, Keypoints)>,
    lookup: HashMap<ImageId, usize>,
}

impl LocalFeatureSet {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("local descriptor dimension must be positive"));
        }
        Ok(LocalFeatureSet {
            dim,
            images: Vec::new(),
            lookup: HashMap::new(),
        })
    }

    pub fn insert(&mut self, id: ImageId, keypoints: Keypoints) -> Result<()> {
        if keypoints.dim() != self.dim {
            return Err(Error::validation(format!(
                "keypoints of {id} have dimension {}, expected {}",
                keypoints.dim(),
                self.dim
            )));
        }
        if self.lookup.contains_key(&id) {
            return Err(Error::validation(format!("duplicate image id {id}")));
        }
        self.lookup.insert(id.clone(), self.images.len());
        self.images.push((id, keypoints));
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Keypoints> {
        self.lookup.get(id).map(|&i| &self.images[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ImageId, &Keypoints)> + '_ {
        self.images.iter().map(|(id, kp)| (id, kp))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelTable {
    entries: Vec<(ImageId, Label)>,
    lookup: HashMap<ImageId, Label>,
    distinct: BTreeSet<Label>,
}

impl LabelTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: ImageId, label: Label) -> Result<()> {
        if self.lookup.contains_key(&id) {
            return Err(Error::validation(format!("image {id} is labeled more than once")));
        }
        self.lookup.insert(id.clone(), label);
        self.distinct.insert(label);
        self.entries.push((id, label));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<Label> {
        self.lookup.get(id).copied()
    }

    /// Number of distinct labels.
    pub fn label_count(&self) -> usize {
        self.distinct.len()
    }

    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        self.distinct.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ImageId, Label)> + '_ {
        self.entries.iter().map(|(id, l)| (id, *l))
    }
}

/// Relevant index images per query.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    entries: Vec<(ImageId, BTreeSet<ImageId>)>,
    lookup: HashMap<ImageId, usize>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: ImageId, relevant: BTreeSet<ImageId>) -> Result<()> {
        if self.lookup.contains_key(&query) {
            return Err(Error::validation(format!("query {query} appears more than once")));
        }
        self.lookup.insert(query.clone(), self.entries.len());
        self.entries.push((query, relevant));
        Ok(())
    }

    pub fn get(&self, query: &str) -> Option<&BTreeSet<ImageId>> {
        self.lookup.get(query).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ImageId, &BTreeSet<ImageId>)> + '_ {
        self.entries.iter().map(|(q, r)| (q, r))
    }

    /// Checks that every relevant id belongs to `index`.
    pub fn validate_against(&self, index: &DescriptorSet) -> Result<()> {
        for (query, relevant) in &self.entries {
            if let Some(missing) = relevant.iter().find(|id| !index.contains(id.as_str())) {
                return Err(Error::validation(format!(
                    "ground truth for {query} lists {missing}, which is not in the index set"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_id_rules() {
        assert!(ImageId::new("a1b2").is_ok());
        assert!(ImageId::new("").is_err());
        assert!(ImageId::new("a b").is_err());
        assert!(ImageId::new("a\tb").is_err());
        assert!(ImageId::new("#label:3").is_err());
        assert!(ImageId::new("#other").is_ok());
        assert!(ImageId::hub(Label(3)).is_hub());
    }

    #[test]
    fn descriptor_set_rejects_bad_rows() {
        let mut set = DescriptorSet::new(2, Role::Query).unwrap();
        set.push(ImageId::new("a").unwrap(), &[1.0, 0.0]).unwrap();
        assert!(matches!(
            set.push(ImageId::new("a").unwrap(), &[0.0, 1.0]),
            Err(Error::Validation(_))
        ));
        assert!(set.push(ImageId::new("b").unwrap(), &[1.0]).is_err());
        assert!(set.push(ImageId::new("c").unwrap(), &[f32::NAN, 0.0]).is_err());
        assert!(set.push(ImageId::new("d").unwrap(), &[f32::INFINITY, 0.0]).is_err());
        assert_eq!(set.len(), 1);
        assert!(DescriptorSet::new(0, Role::Query).is_err());
        assert!(DescriptorSet::new(2, Role::Hub).is_err());
    }

    #[test]
    fn normalize_counts_only_off_norm_rows() {
        let mut set =
            DescriptorSet::from_rows(2, Role::Index, [("a", vec![1.0, 0.0]), ("b", vec![3.0, 4.0])]).unwrap();
        assert_eq!(set.normalize().unwrap(), 1);
        assert_eq!(set.get("a").unwrap(), &[1.0, 0.0]);
        let b = set.get("b").unwrap();
        assert!((b[0] - 0.6).abs() < 1e-7 && (b[1] - 0.8).abs() < 1e-7);

        let mut zero = DescriptorSet::from_rows(2, Role::Index, [("z", vec![0.0, 0.0])]).unwrap();
        assert!(zero.normalize().is_err());
    }

    #[test]
    fn label_count_is_distinct_labels() {
        let mut t = LabelTable::new();
        for (id, l) in [("a", 5), ("b", 5), ("c", 9)] {
            t.insert(ImageId::new(id).unwrap(), Label(l)).unwrap();
        }
        assert_eq!(t.label_count(), 2);
        assert_eq!(t.get("b"), Some(Label(5)));
        assert!(t.insert(ImageId::new("a").unwrap(), Label(5)).is_err());
    }

    #[test]
    fn ground_truth_subset_check() {
        let index = DescriptorSet::from_rows(1, Role::Index, [("x", vec![1.0])]).unwrap();
        let mut gt = GroundTruth::new();
        gt.insert(
            ImageId::new("q").unwrap(),
            [ImageId::new("x").unwrap()].into_iter().collect(),
        )
        .unwrap();
        assert!(gt.validate_against(&index).is_ok());
        gt.insert(
            ImageId::new("q2").unwrap(),
            [ImageId::new("y").unwrap()].into_iter().collect(),
        )
        .unwrap();
        assert!(gt.validate_against(&index).is_err());
    }
}
