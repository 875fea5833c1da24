//! Group-size-flexible registration network.
//!
//! A multi-scale residual UNet whose convolutions are group blocks: each
//! member's features are concatenated with a summary statistic taken across
//! the group before a shared convolution. The network emits one stationary
//! velocity field per member; the centrality layer then removes the group
//! mean velocity.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Statistic, Var};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Real;
use crate::seed::SeedPath;
use crate::tensor::Tensor;
use crate::volume::{ImageVolume, ProbSeg, VelocityField, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub dims: usize,
    pub enc_widths: Vec<usize>,
    pub dec_widths: Vec<usize>,
    pub post_widths: Vec<usize>,
    pub statistic: Statistic,
    pub use_group_block: bool,
    pub use_centrality: bool,
    pub activation_slope: f64,
    pub svf_head_init_scale: f64,
    pub integration_steps: usize,
    pub kernel_size: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            dims: 2,
            enc_widths: vec![16, 32, 32, 32],
            dec_widths: vec![32, 32, 32, 16],
            post_widths: vec![16, 16],
            statistic: Statistic::Mean,
            use_group_block: true,
            use_centrality: true,
            activation_slope: 0.2,
            svf_head_init_scale: 1e-5,
            integration_steps: crate::fields::DEFAULT_STEPS,
            kernel_size: 3,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.dims == 2 || self.dims == 3) {
            return bad(format!("dims must be 2 or 3, got {}", self.dims));
        }
        if self.enc_widths.is_empty() || self.enc_widths.len() != self.dec_widths.len() {
            return bad(format!(
                "encoder/decoder depths must be equal and positive: {} vs {}",
                self.enc_widths.len(),
                self.dec_widths.len()
            ));
        }
        if self
            .enc_widths
            .iter()
            .chain(&self.dec_widths)
            .chain(&self.post_widths)
            .any(|&w| w == 0)
        {
            return bad("channel widths must be positive".into());
        }
        if self.kernel_size % 2 == 0 {
            return bad(format!("kernel size must be odd, got {}", self.kernel_size));
        }
        if self.integration_steps == 0 {
            return bad("integration steps must be >= 1".into());
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.enc_widths.len()
    }

    /// Required divisor of every grid extent.
    pub fn grid_divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn check_grid(&self, grid: &Grid) -> Result<()> {
        if grid.dims() != self.dims {
            return Err(Error::GridMismatch(format!(
                "network is {}-D but grid is {}-D",
                self.dims,
                grid.dims()
            )));
        }
        let div = self.grid_divisor();
        if grid.extent().iter().any(|e| e % div != 0) {
            return Err(Error::GridMismatch(format!(
                "grid extents {:?} must be divisible by {div}",
                grid.extent()
            )));
        }
        Ok(())
    }

    fn spatial3(&self, s: usize) -> [usize; 3] {
        if self.dims == 2 {
            [1, s, s]
        } else {
            [s, s, s]
        }
    }

    fn kernel3(&self) -> [usize; 3] {
        self.spatial3(self.kernel_size)
    }

    /// Ordered layer plan.
    pub(crate) fn layers(&self) -> Vec<LayerSpec> {
        let l = self.levels();
        let mut out = Vec::new();
        let mut cin = 1;
        for (i, &w) in self.enc_widths.iter().enumerate() {
            out.push(LayerSpec::block(format!("enc{i}"), cin, w, if i == 0 { 1 } else { 2 }));
            cin = w;
        }
        for (j, &w) in self.dec_widths.iter().enumerate() {
            out.push(LayerSpec::block(format!("dec{j}"), cin, w, 1));
            cin = if j + 1 < l { w + self.enc_widths[l - 2 - j] } else { w };
        }
        for (k, &w) in self.post_widths.iter().enumerate() {
            out.push(LayerSpec::block(format!("post{k}"), cin, w, 1));
            cin = w;
        }
        out.push(LayerSpec {
            name: "head".into(),
            cin,
            cout: self.dims,
            stride: 1,
            grouped: false,
            activate: false,
        });
        out
    }

    fn kernel_shape(&self, layer: &LayerSpec) -> Vec<usize> {
        let fan = if layer.grouped && self.use_group_block { 2 } else { 1 };
        let k = self.kernel3();
        vec![layer.cout, layer.cin * fan, k[0], k[1], k[2]]
    }

    /// Parameter names and shapes, in layer order. Independent of group size.
    pub fn parameter_index(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for layer in self.layers() {
            out.push((format!("{}.weight", layer.name), self.kernel_shape(&layer)));
            out.push((format!("{}.bias", layer.name), vec![layer.cout]));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LayerSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    /// Uses the group summary (false only for the velocity head).
    pub grouped: bool,
    pub activate: bool,
}

impl LayerSpec {
    fn block(name: String, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            name,
            cin,
            cout,
            stride,
            grouped: true,
            activate: true,
        }
    }

    fn residual(&self) -> bool {
        self.activate && self.stride == 1 && self.cin == self.cout
    }
}

/// Named parameter tensors in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ModelParams<T> {
    pub fn from_entries(entries: Vec<(String, Tensor<T>)>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor<T>)] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn index(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Errors unless names and shapes match the configuration exactly.
    pub fn check_against(&self, config: &NetConfig) -> Result<()> {
        let want = config.parameter_index();
        let have = self.index();
        if want != have {
            let detail = want
                .iter()
                .zip(&have)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {a:?}, found {b:?}"))
                .unwrap_or_else(|| format!("expected {} tensors, found {}", want.len(), have.len()));
            return Err(Error::ShapeMismatch(format!("parameter mismatch: {detail}")));
        }
        Ok(())
    }

    /// Registers every tensor on the tape (as leaves when `trainable`).
    pub fn attach(&self, g: &mut Graph<T>, trainable: bool) -> ParamVars {
        let mut vars = Vec::with_capacity(self.entries.len());
        let mut by_name = HashMap::new();
        for (i, (name, t)) in self.entries.iter().enumerate() {
            let v = if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            };
            vars.push(v);
            by_name.insert(name.clone(), i);
        }
        ParamVars { vars, by_name }
    }
}

/// Tape handles for a [`ModelParams`], aligned with its entry order.
pub struct ParamVars {
    pub vars: Vec<Var>,
    by_name: HashMap<String, usize>,
}

impl ParamVars {
    fn get(&self, name: &str) -> Var {
        self.vars[self.by_name[name]]
    }
}

/// Deterministic initialization: fan-in-scaled uniform kernels, zero biases,
/// and a near-zero Gaussian velocity head.
pub fn init_params<T: Real>(config: &NetConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let root = SeedPath::new(seed).child(0x1417);
    let slope = config.activation_slope;
    let mut entries = Vec::new();
    for (li, layer) in config.layers().into_iter().enumerate() {
        let shape = config.kernel_shape(&layer);
        let n: usize = shape.iter().product();
        let mut rng = root.child(li as u64).rng();
        let w: Vec<T> = if layer.name == "head" {
            let normal = Normal::new(0.0, config.svf_head_init_scale)
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect()
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
            let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            (0..n).map(|_| T::lit(rng.sample(u))).collect()
        };
        entries.push((format!("{}.weight", layer.name), Tensor::from_vec(&shape, w)));
        entries.push((format!("{}.bias", layer.name), Tensor::zeros(&[layer.cout])));
    }
    Ok(ModelParams { entries })
}

/// Options for a single group block evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockSpec {
    pub statistic: Statistic,
    pub use_group_block: bool,
    pub stride: [usize; 3],
    pub activation_slope: Option<f64>,
    pub residual: bool,
}

/// `Conv([c_i ‖ s(c)])` for every member, then optional activation and residual.
///
/// The concatenation is evaluated as `W_self * c_i + W_group * s(c)` so the
/// group half of the convolution runs once per group.
pub fn group_block_graph<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    spec: &BlockSpec,
) -> Var {
    let cin = g.value(x).dim(1);
    let mut y = if spec.use_group_block {
        let s = g.group_reduce(x, spec.statistic);
        let w_self = g.narrow_channels(weight, 0, cin);
        let w_group = g.narrow_channels(weight, cin, cin);
        let own = g.conv(x, w_self, bias, spec.stride);
        let shared = g.conv(s, w_group, None, spec.stride);
        g.add_broadcast(own, shared)
    } else {
        g.conv(x, weight, bias, spec.stride)
    };
    if let Some(slope) = spec.activation_slope {
        y = g.leaky_relu(y, T::lit(slope));
    }
    if spec.residual && g.value(y).shape() == g.value(x).shape() {
        y = g.add(y, x);
    }
    y
}

/// Eager group block over a list of equally shaped feature maps.
pub fn group_block<T: Real>(
    features: &[Volume<T>],
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &BlockSpec,
) -> Result<Vec<Volume<T>>> {
    let first = features
        .first()
        .ok_or_else(|| Error::InvalidConfig("group block needs at least one member".into()))?;
    for f in features {
        first.grid().check(f.grid(), "group block")?;
        if f.channels() != first.channels() {
            return Err(Error::ShapeMismatch(format!(
                "member channels {} vs {}",
                f.channels(),
                first.channels()
            )));
        }
    }
    let rows: Vec<Tensor<T>> = features.iter().map(|f| f.to_tensor()).collect();
    let stacked = Tensor::stack_rows(&rows.iter().collect::<Vec<_>>());
    let mut g = Graph::new();
    let x = g.constant(stacked);
    let w = g.constant(weight.clone());
    let b = g.constant(bias.clone());
    let y = group_block_graph(&mut g, x, w, Some(b), spec);
    let out = g.value(y);
    let [od, oh, ow] = crate::autodiff::spatial(out);
    let extent: Vec<usize> = if first.grid().dims() == 2 {
        vec![oh, ow]
    } else {
        vec![od, oh, ow]
    };
    let grid = Grid::new(&extent)?;
    (0..out.dim(0))
        .map(|i| Volume::from_tensor_row(&grid, out, i))
        .collect()
}

/// Network forward pass on the tape: `[m, 1, ...]` images to `[m, dims, ...]` velocities.
pub fn forward_graph<T: Real>(g: &mut Graph<T>, images: Var, params: &ParamVars, config: &NetConfig) -> Var {
    let l = config.levels();
    let mut skips = Vec::with_capacity(l);
    let mut h = images;
    let layers = config.layers();
    let mut it = layers.iter();
    let block = |g: &mut Graph<T>, h: Var, layer: &LayerSpec| {
        let spec = BlockSpec {
            statistic: config.statistic,
            use_group_block: config.use_group_block && layer.grouped,
            stride: config.spatial3(layer.stride),
            activation_slope: layer.activate.then_some(config.activation_slope),
            residual: layer.residual(),
        };
        let w = params.get(&format!("{}.weight", layer.name));
        let b = params.get(&format!("{}.bias", layer.name));
        group_block_graph(g, h, w, Some(b), &spec)
    };
    for _ in 0..l {
        h = block(g, h, it.next().expect("encoder layer"));
        skips.push(h);
    }
    for j in 0..l {
        h = block(g, h, it.next().expect("decoder layer"));
        if j + 1 < l {
            h = g.upsample_nearest(h, config.spatial3(2));
            h = g.concat_channels(h, skips[l - 2 - j]);
        }
    }
    for layer in it {
        h = block(g, h, layer);
    }
    if config.use_centrality {
        h = g.subtract_group_mean(h);
    }
    h
}

/// Metadata attached to a group member.
pub type Metadata = BTreeMap<String, serde_json::Value>;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupMember<T> {
    pub image: ImageVolume<T>,
    pub seg: Option<ProbSeg<T>>,
    pub meta: Metadata,
}

impl<T: Real> GroupMember<T> {
    pub fn new(image: ImageVolume<T>) -> Self {
        Self {
            image,
            seg: None,
            meta: Metadata::new(),
        }
    }

    pub fn with_seg(mut self, seg: ProbSeg<T>) -> Self {
        self.seg = Some(seg);
        self
    }

    pub fn id(&self) -> Option<&str> {
        self.meta.get("id").and_then(|v| v.as_str())
    }
}

/// Ordered set of images sharing one grid (and one modality, when recorded).
#[derive(Clone, Debug, PartialEq)]
pub struct GroupBatch<T> {
    members: Vec<GroupMember<T>>,
}

impl<T: Real> GroupBatch<T> {
    pub fn new(members: Vec<GroupMember<T>>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidConfig("a group needs at least one member".into()))?;
        let modality = first.meta.get("modality");
        for m in &members {
            first.image.grid().check(m.image.grid(), "group member")?;
            if let Some(s) = &m.seg {
                first.image.grid().check(s.grid(), "member segmentation")?;
            }
            if let (Some(a), Some(b)) = (modality, m.meta.get("modality")) {
                if a != b {
                    return Err(Error::InvalidConfig(format!(
                        "mixed modalities in one group: {a} vs {b}"
                    )));
                }
            }
        }
        Ok(Self { members })
    }

    pub fn from_images(images: Vec<ImageVolume<T>>) -> Result<Self> {
        Self::new(images.into_iter().map(GroupMember::new).collect())
    }

    pub fn members(&self) -> &[GroupMember<T>] {
        &self.members
    }

    pub fn into_members(self) -> Vec<GroupMember<T>> {
        self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn grid(&self) -> &Grid {
        self.members[0].image.grid()
    }

    /// `[m, 1, D, H, W]`.
    pub fn image_tensor(&self) -> Tensor<T> {
        let rows: Vec<Tensor<T>> = self.members.iter().map(|m| m.image.to_tensor()).collect();
        Tensor::stack_rows(&rows.iter().collect::<Vec<_>>())
    }

    /// Members at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Self::new(idx.iter().map(|&i| self.members[i].clone()).collect())
    }

    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        self.subset(perm)
    }
}

/// Velocity fields for every member of `group`.
pub fn forward<T: Real>(
    group: &GroupBatch<T>,
    params: &ModelParams<T>,
    config: &NetConfig,
) -> Result<Vec<VelocityField<T>>> {
    config.validate()?;
    config.check_grid(group.grid())?;
    params.check_against(config)?;
    let mut g = Graph::new();
    let pv = params.attach(&mut g, false);
    let x = g.constant(group.image_tensor());
    let v = forward_graph(&mut g, x, &pv, config);
    split_fields(group.grid(), g.value(v))
}

pub(crate) fn split_fields<T: Real>(grid: &Grid, t: &Tensor<T>) -> Result<Vec<VelocityField<T>>> {
    (0..t.dim(0))
        .map(|i| VelocityField::from_volume(Volume::from_tensor_row(grid, t, i)?))
        .collect()
}

/// `v_i - (1/m) Σ_j v_j`.
pub fn centrality_project<T: Real>(vs: &[VelocityField<T>]) -> Result<Vec<VelocityField<T>>> {
    let first = vs
        .first()
        .ok_or_else(|| Error::InvalidConfig("centrality needs at least one field".into()))?;
    for v in vs {
        first.grid().check(v.grid(), "centrality projection")?;
    }
    let n = first.data().len();
    let mut acc = vec![0.0f64; n];
    for v in vs {
        for (a, &b) in acc.iter_mut().zip(v.data()) {
            *a += b.to_f64_lossy();
        }
    }
    let mean: Vec<T> = acc.iter().map(|&a| T::lit(a / vs.len() as f64)).collect();
    vs.iter()
        .map(|v| {
            VelocityField::new(
                v.grid().clone(),
                v.data().iter().zip(&mean).map(|(&x, &m)| x - m).collect(),
            )
        })
        .collect()
}
