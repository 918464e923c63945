//! Local features: keypoints, descriptors, the extractor interface and the
//! rectified-extraction orchestration.

mod format;
mod reference;

use crate::error::{Error, Result};
use crate::raster::{GrayImage, Mask};
use crate::rectification::{backwarp_keypoints, KeypointTransport, RectifiedSet};

pub use format::{read_features, write_features};
pub use reference::{gaussian_blur, ReferenceExtractor, ReferenceParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// Detection scale in pixels of the raster the keypoint lives in.
    pub scale: f64,
    /// Radians.
    pub orientation: f64,
    pub score: f64,
}

/// Where a feature was extracted: a rectified patch or the non-planar
/// remainder of the original image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    NonPlanar,
    Patch(u32),
}

impl Provenance {
    pub fn to_i32(self) -> i32 {
        match self {
            Provenance::NonPlanar => -1,
            Provenance::Patch(i) => i as i32,
        }
    }

    pub fn from_i32(v: i32) -> Self {
        if v < 0 {
            Provenance::NonPlanar
        } else {
            Provenance::Patch(v as u32)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DescriptorKind {
    /// `dim` float32 values per feature, L2-normalized.
    Float { dim: usize },
    /// `bytes` packed bits per feature, compared by Hamming distance.
    Bits { bytes: usize },
}

impl DescriptorKind {
    pub fn len(&self) -> usize {
        match *self {
            DescriptorKind::Float { dim } => dim,
            DescriptorKind::Bits { bytes } => bytes,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Descriptors {
    Float { dim: usize, data: Vec<f32> },
    Bits { bytes: usize, data: Vec<u8> },
}

impl Descriptors {
    pub fn empty(kind: DescriptorKind) -> Self {
        match kind {
            DescriptorKind::Float { dim } => Descriptors::Float { dim, data: Vec::new() },
            DescriptorKind::Bits { bytes } => Descriptors::Bits {
                bytes,
                data: Vec::new(),
            },
        }
    }

    pub fn kind(&self) -> DescriptorKind {
        match self {
            Descriptors::Float { dim, .. } => DescriptorKind::Float { dim: *dim },
            Descriptors::Bits { bytes, .. } => DescriptorKind::Bits { bytes: *bytes },
        }
    }

    pub fn count(&self) -> usize {
        match self {
            Descriptors::Float { dim, data } => data.len().checked_div(*dim).unwrap_or(0),
            Descriptors::Bits { bytes, data } => data.len().checked_div(*bytes).unwrap_or(0),
        }
    }

    pub fn float(&self, i: usize) -> Option<&[f32]> {
        match self {
            Descriptors::Float { dim, data } => Some(&data[i * dim..(i + 1) * dim]),
            Descriptors::Bits { .. } => None,
        }
    }

    pub fn bits(&self, i: usize) -> Option<&[u8]> {
        match self {
            Descriptors::Bits { bytes, data } => Some(&data[i * bytes..(i + 1) * bytes]),
            Descriptors::Float { .. } => None,
        }
    }

    fn push_from(&mut self, other: &Descriptors, i: usize) {
        match (self, other) {
            (Descriptors::Float { data, .. }, Descriptors::Float { .. }) => {
                data.extend_from_slice(other.float(i).expect("float"))
            }
            (Descriptors::Bits { data, .. }, Descriptors::Bits { .. }) => {
                data.extend_from_slice(other.bits(i).expect("bits"))
            }
            _ => panic!("descriptor kinds differ"),
        }
    }
}

/// Keypoints with parallel descriptors and provenance tags.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Descriptors,
    pub provenance: Vec<Provenance>,
}

impl FeatureSet {
    pub fn empty(kind: DescriptorKind) -> Self {
        Self {
            keypoints: Vec::new(),
            descriptors: Descriptors::empty(kind),
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn kind(&self) -> DescriptorKind {
        self.descriptors.kind()
    }

    /// Structural invariants: parallel lists of equal length.
    pub fn check(&self) -> Result<()> {
        if self.descriptors.count() != self.keypoints.len() || self.provenance.len() != self.keypoints.len() {
            return Err(Error::Format(format!(
                "feature set has {} keypoints, {} descriptors, {} provenance tags",
                self.keypoints.len(),
                self.descriptors.count(),
                self.provenance.len()
            )));
        }
        Ok(())
    }

    /// Append feature `i` of `other` with a new keypoint and provenance.
    pub fn push_from(&mut self, other: &FeatureSet, i: usize, keypoint: Keypoint, provenance: Provenance) {
        self.keypoints.push(keypoint);
        self.descriptors.push_from(&other.descriptors, i);
        self.provenance.push(provenance);
    }

    pub fn append(&mut self, other: &FeatureSet) -> Result<()> {
        if other.kind() != self.kind() {
            return Err(Error::DescriptorMismatch(format!(
                "cannot merge {:?} into {:?}",
                other.kind(),
                self.kind()
            )));
        }
        for i in 0..other.len() {
            self.push_from(other, i, other.keypoints[i], other.provenance[i]);
        }
        Ok(())
    }

    pub fn truncate(&mut self, n: usize) {
        if n >= self.len() {
            return;
        }
        self.keypoints.truncate(n);
        self.provenance.truncate(n);
        match &mut self.descriptors {
            Descriptors::Float { dim, data } => data.truncate(n * *dim),
            Descriptors::Bits { bytes, data } => data.truncate(n * *bytes),
        }
    }

    pub fn with_provenance(mut self, p: Provenance) -> Self {
        self.provenance.iter_mut().for_each(|t| *t = p);
        self
    }
}

pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> &'static str;

    /// Half-side, in units of keypoint scale, of the square a descriptor
    /// depends on.
    fn support_radius(&self) -> f64;

    fn descriptor_kind(&self) -> DescriptorKind;

    /// Detect and describe, strongest first. With `support`, keypoints whose
    /// support square is not entirely inside the mask are skipped.
    fn extract(&self, image: &GrayImage, support: Option<&Mask>) -> FeatureSet;
}

pub fn extractor_by_id(id: &str, max_features: usize) -> Result<Box<dyn FeatureExtractor>> {
    match id {
        "reference" => Ok(Box::new(ReferenceExtractor::new(ReferenceParams {
            max_features,
            ..ReferenceParams::default()
        }))),
        other => Err(Error::UnknownExtractor(other.to_string())),
    }
}

/// True when the support square of `kp` fits inside the mask.
pub fn support_inside(kp: &Keypoint, radius: f64, holes: &crate::raster::HoleIntegral) -> bool {
    let r = radius * kp.scale;
    holes.box_is_full(
        (kp.x - r).floor() as i64,
        (kp.y - r).floor() as i64,
        (kp.x + r).ceil() as i64,
        (kp.y + r).ceil() as i64,
    )
}

/// Run an extractor restricted to `mask`, discarding features whose
/// descriptor support leaves the mask or the raster.
pub fn detect_and_describe(image: &GrayImage, mask: &Mask, extractor: &dyn FeatureExtractor) -> Result<FeatureSet> {
    image.same_dims(mask)?;
    let raw = extractor.extract(image, Some(mask));
    let holes = mask.hole_integral();
    let mut out = FeatureSet::empty(raw.kind());
    for i in 0..raw.len() {
        let kp = raw.keypoints[i];
        if support_inside(&kp, extractor.support_radius(), &holes) {
            out.push_from(&raw, i, kp, raw.provenance[i]);
        }
    }
    Ok(out)
}

/// Plain extraction over the whole image.
pub fn extract_plain(image: &GrayImage, extractor: &dyn FeatureExtractor) -> Result<FeatureSet> {
    detect_and_describe(image, &Mask::new(image.width(), image.height(), true), extractor)
        .map(|fs| fs.with_provenance(Provenance::NonPlanar))
}

/// Extract on every rectified patch (mapping keypoints back to the original
/// frame, descriptors untouched) and on the non-planar remainder.
///
/// Each patch keeps at most its area share of `budget` features so the
/// total stays comparable to plain extraction.
pub fn extract_rectified_features(
    image: &GrayImage,
    rset: &RectifiedSet,
    extractor: &dyn FeatureExtractor,
    transport: KeypointTransport,
    budget: Option<usize>,
) -> Result<FeatureSet> {
    image.same_dims(&rset.non_planar)?;
    let total_px = (image.width() * image.height()) as f64;
    let share = |pixels: usize| budget.map(|b| ((b as f64 * pixels as f64 / total_px).ceil() as usize).max(32));

    let mut out = FeatureSet::empty(extractor.descriptor_kind());
    for (pi, patch) in rset.patches.iter().enumerate() {
        let mut fs = detect_and_describe(&patch.raster.image, &patch.raster.valid, extractor)?;
        let mapped = backwarp_keypoints(
            &fs.keypoints,
            &patch.homography,
            image.width(),
            image.height(),
            transport,
        )?;
        let mut local = FeatureSet::empty(fs.kind());
        for (i, kp) in mapped {
            let (px, py) = (kp.x.round() as usize, kp.y.round() as usize);
            if *patch.patch.mask.get(px, py) {
                local.push_from(&fs, i, kp, Provenance::Patch(pi as u32));
            }
        }
        fs = local;
        if let Some(n) = share(patch.patch.pixel_count) {
            fs.truncate(n);
        }
        out.append(&fs)?;
    }
    let mut rest = detect_and_describe(image, &rset.non_planar, extractor)?.with_provenance(Provenance::NonPlanar);
    if !rset.patches.is_empty() {
        if let Some(n) = share(rset.non_planar.count()) {
            rest.truncate(n);
        }
    }
    out.append(&rest)?;
    Ok(out)
}
