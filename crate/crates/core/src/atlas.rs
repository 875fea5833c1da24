//! Atlas construction from a trained network: forward, integrate, warp and
//! average. Also metadata-driven subgroup selection.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::fields;
use crate::groupnet::{self, GroupBatch, GroupMember, Metadata, ModelParams, NetConfig};
use crate::scalar::Real;
use crate::tensorio::{self, DatasetManifest, SubjectRecord};
use crate::volume::{DisplacementField, ImageVolume, ProbSeg, VelocityField, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct AtlasResult<T> {
    pub atlas: ImageVolume<T>,
    pub atlas_seg: Option<ProbSeg<T>>,
    pub velocities: Vec<VelocityField<T>>,
    pub displacements: Vec<DisplacementField<T>>,
    pub warped: Vec<ImageVolume<T>>,
    /// Warped member segmentations, `None` where the member had none.
    pub warped_segs: Vec<Option<ProbSeg<T>>>,
    pub seconds: f64,
    pub ids: Vec<String>,
    /// `(outer iteration, objective)` pairs; empty for the network path.
    pub trace: Vec<(usize, f64)>,
}

impl<T: Real> AtlasResult<T> {
    pub fn len(&self) -> usize {
        self.velocities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocities.is_empty()
    }
}

pub(crate) fn member_ids<T: Real>(group: &GroupBatch<T>) -> Vec<String> {
    group
        .members()
        .iter()
        .enumerate()
        .map(|(i, m)| m.id().map(str::to_owned).unwrap_or_else(|| format!("member-{i}")))
        .collect()
}

/// Voxelwise mean of equally shaped volumes.
pub(crate) fn mean_volume<T: Real>(vs: &[&Volume<T>]) -> Result<Volume<T>> {
    let first = vs
        .first()
        .ok_or_else(|| Error::EmptySelection("nothing to average".into()))?;
    let mut acc = vec![T::zero(); first.data().len()];
    for v in vs {
        first.grid().check(v.grid(), "average")?;
        if v.channels() != first.channels() {
            return Err(Error::ShapeMismatch(format!(
                "averaging {} and {} channels",
                first.channels(),
                v.channels()
            )));
        }
        for (a, &b) in acc.iter_mut().zip(v.data()) {
            *a += b;
        }
    }
    let inv = T::one() / T::from_usize_lossy(vs.len());
    acc.iter_mut().for_each(|a| *a *= inv);
    Volume::new(first.grid().clone(), first.channels(), acc)
}

/// Set-wise average of warped probability maps, renormalized per voxel.
pub fn build_atlas_seg<T: Real>(warped_segs: &[ProbSeg<T>]) -> Result<ProbSeg<T>> {
    let vols: Vec<&Volume<T>> = warped_segs.iter().map(|s| &**s).collect();
    Ok(fields::renormalize(mean_volume(&vols)?))
}

/// Integrates, warps and aggregates given member velocities.
pub(crate) fn assemble<T: Real>(
    group: &GroupBatch<T>,
    velocities: Vec<VelocityField<T>>,
    steps: usize,
) -> Result<AtlasResult<T>> {
    let mut displacements = Vec::with_capacity(velocities.len());
    let mut warped = Vec::with_capacity(velocities.len());
    let mut warped_segs = Vec::with_capacity(velocities.len());
    for (v, m) in velocities.iter().zip(group.members()) {
        let u = fields::integrate_svf(v, steps)?;
        warped.push(fields::warp_image(&m.image, &u)?);
        warped_segs.push(m.seg.as_ref().map(|s| fields::warp_seg(s, &u)).transpose()?);
        displacements.push(u);
    }
    let atlas = ImageVolume::from_volume(mean_volume(&warped.iter().map(|w| &**w).collect::<Vec<_>>())?)?;
    let available: Vec<ProbSeg<T>> = warped_segs.iter().flatten().cloned().collect();
    let atlas_seg = if available.is_empty() {
        None
    } else {
        Some(build_atlas_seg(&available)?)
    };
    Ok(AtlasResult {
        atlas,
        atlas_seg,
        velocities,
        displacements,
        warped,
        warped_segs,
        seconds: 0.0,
        ids: member_ids(group),
        trace: Vec::new(),
    })
}

/// Atlas of `group` in one forward pass.
pub fn build_atlas<T: Real>(params: &ModelParams<T>, config: &NetConfig, group: &GroupBatch<T>) -> Result<AtlasResult<T>> {
    let start = Instant::now();
    let velocities = groupnet::forward(group, params, config)?;
    let mut result = assemble(group, velocities, config.integration_steps)?;
    result.seconds = start.elapsed().as_secs_f64();
    Ok(result)
}

/// Metadata criteria; every set criterion must match.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubgroupFilter {
    pub modality: Option<String>,
    /// Inclusive lower bound, years.
    pub age_min: Option<f64>,
    /// Exclusive upper bound, years.
    pub age_max: Option<f64>,
    pub diagnosis: Option<String>,
    pub ids: Option<Vec<String>>,
    pub max_size: Option<usize>,
}

impl SubgroupFilter {
    pub fn validate(&self) -> Result<()> {
        let any = self.modality.is_some()
            || self.age_min.is_some()
            || self.age_max.is_some()
            || self.diagnosis.is_some()
            || self.ids.is_some()
            || self.max_size.is_some();
        if !any {
            return Err(Error::InvalidConfig("subgroup filter sets no criterion".into()));
        }
        if let (Some(lo), Some(hi)) = (self.age_min, self.age_max) {
            if lo >= hi {
                return Err(Error::InvalidConfig(format!("empty age interval [{lo}, {hi})")));
            }
        }
        if self.max_size == Some(0) {
            return Err(Error::InvalidConfig("max size must be positive".into()));
        }
        Ok(())
    }

    fn matches(&self, line: usize, r: &SubjectRecord) -> Result<bool> {
        if let Some(m) = &self.modality {
            if &r.modality != m {
                return Ok(false);
            }
        }
        if self.age_min.is_some() || self.age_max.is_some() {
            let age = r.age.ok_or(Error::MissingField { line, field: "age" })?;
            if self.age_min.is_some_and(|lo| age < lo) || self.age_max.is_some_and(|hi| age >= hi) {
                return Ok(false);
            }
        }
        if let Some(d) = &self.diagnosis {
            let have = r.diagnosis.as_ref().ok_or(Error::MissingField { line, field: "diagnosis" })?;
            if have != d {
                return Ok(false);
            }
        }
        if let Some(ids) = &self.ids {
            if !ids.contains(&r.id) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Matching records in manifest order, truncated to `max_size`.
pub fn subgroup_records<'a>(manifest: &'a DatasetManifest, filter: &SubgroupFilter) -> Result<Vec<&'a SubjectRecord>> {
    filter.validate()?;
    let mut out = Vec::new();
    for (i, r) in manifest.records.iter().enumerate() {
        if filter.matches(i + 1, r)? {
            out.push(r);
        }
    }
    if let Some(n) = filter.max_size {
        out.truncate(n);
    }
    if out.is_empty() {
        return Err(Error::EmptySelection(format!("no subject matches {filter:?}")));
    }
    Ok(out)
}

pub(crate) fn record_meta(r: &SubjectRecord) -> Metadata {
    let mut meta = Metadata::new();
    meta.insert("id".into(), r.id.clone().into());
    meta.insert("modality".into(), r.modality.clone().into());
    if let Some(a) = r.age {
        meta.insert("age".into(), a.into());
    }
    if let Some(d) = &r.diagnosis {
        meta.insert("diagnosis".into(), d.clone().into());
    }
    meta.insert("split".into(), serde_json::to_value(r.split).expect("split serializes"));
    meta
}

/// Loads one record's image and (optional) segmentation.
pub fn load_member(r: &SubjectRecord) -> Result<GroupMember<f32>> {
    Ok(GroupMember {
        image: tensorio::read_image(&r.image_path)?,
        seg: r.seg_path.as_ref().map(tensorio::read_seg).transpose()?,
        meta: record_meta(r),
    })
}

/// Loads the selected subjects as a group.
pub fn subgroup_select(manifest: &DatasetManifest, filter: &SubgroupFilter) -> Result<GroupBatch<f32>> {
    let members = subgroup_records(manifest, filter)?
        .into_iter()
        .map(load_member)
        .collect::<Result<Vec<_>>>()?;
    GroupBatch::new(members)
}

/// Writes atlas, atlas segmentation, per-member fields and a JSON sidecar.
pub fn save_atlas(dir: impl AsRef<Path>, result: &AtlasResult<f32>, metrics: &Value) -> Result<()> {
    let dir = dir.as_ref();
    let fdir = dir.join("fields");
    std::fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
    tensorio::write_volume(dir.join("atlas.tensor"), &result.atlas, Map::new())?;
    if let Some(s) = &result.atlas_seg {
        tensorio::write_volume(dir.join("atlas_seg.tensor"), s, Map::new())?;
    }
    for (i, id) in result.ids.iter().enumerate() {
        let mut meta = Map::new();
        meta.insert("id".into(), id.clone().into());
        tensorio::write_volume(fdir.join(format!("velocity_{i}.tensor")), &result.velocities[i], meta.clone())?;
        tensorio::write_volume(fdir.join(format!("displacement_{i}.tensor")), &result.displacements[i], meta.clone())?;
        tensorio::write_volume(fdir.join(format!("warped_{i}.tensor")), &result.warped[i], meta)?;
    }
    let path = dir.join("metrics.json");
    std::fs::write(&path, serde_json::to_string_pretty(metrics)?).map_err(|e| Error::io(&path, e))
}
