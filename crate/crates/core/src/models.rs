//! Network profiles and builders for the localizer, segmenter and classifier.
//!
//! Every convolution block is `conv 3×3 (same padding, no bias) → batch norm
//! → leaky ReLU`. Pooling is always valid 2×2 at stride 2.

use gradcore::{Graph, GraphBuilder, OpKind, Scalar, Source, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StenosisError};
use crate::geometry::{Activation, ConfidenceGrid, GridSpec};

pub const LEAKY_SLOPE: f64 = 0.1;
pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.9;

/// One stage of the localizer's feature extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocLayer {
    /// Convolution block with the given width.
    Conv(usize),
    /// Two convolution blocks with an identity skip around them
    /// (the second block's activation is applied after the sum).
    Residual(usize),
    MaxPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileName {
    Paper,
    Desk,
    /// 8×8 images for whole-graph gradient checks.
    Mini,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub name: ProfileName,
    pub grid: GridSpec,
    /// Feature extractor; a 2×2 valid convolution head follows it.
    pub localizer: Vec<LocLayer>,
    /// Encoder widths, shallowest first.
    pub segmenter_filters: Vec<usize>,
    pub classifier_channels: Vec<usize>,
    /// Indices of classifier convolutions followed by a max pool of the
    /// concatenated stack.
    pub classifier_pools: Vec<usize>,
    /// Silhouette band width in pixels.
    pub silhouette_band: usize,
}

impl Profile {
    pub fn paper() -> Self {
        use LocLayer::*;
        Profile {
            name: ProfileName::Paper,
            grid: GridSpec::paper(),
            localizer: vec![
                Conv(32), MaxPool,
                Conv(64), Residual(64), MaxPool,
                Conv(128), Residual(128), MaxPool,
                Conv(256), Residual(256), Residual(256), MaxPool,
                Conv(512), Residual(512), Residual(512), MaxPool,
                Residual(512), Residual(512),
            ],
            segmenter_filters: vec![32, 64, 128, 256, 512],
            classifier_channels: vec![32, 48, 64, 80, 96],
            classifier_pools: vec![0, 1, 2],
            silhouette_band: 8,
        }
    }

    pub fn desk() -> Self {
        use LocLayer::*;
        Profile {
            name: ProfileName::Desk,
            grid: GridSpec::desk(),
            localizer: vec![Conv(8), MaxPool, Conv(16), MaxPool, Conv(32), MaxPool, Residual(32), MaxPool, Residual(32)],
            segmenter_filters: vec![16, 32, 64, 128],
            classifier_channels: vec![16, 24, 32, 40, 48],
            classifier_pools: vec![0, 1, 2],
            silhouette_band: 4,
        }
    }

    pub fn mini() -> Self {
        use LocLayer::*;
        Profile {
            name: ProfileName::Mini,
            grid: GridSpec { image_size: 8, window: 4, stride: 2, box_size: 4 },
            localizer: vec![Conv(3), MaxPool, Residual(3)],
            segmenter_filters: vec![2, 3],
            classifier_channels: vec![2, 2, 2, 2, 2],
            classifier_pools: vec![0],
            silhouette_band: 1,
        }
    }

    pub fn by_name(name: ProfileName) -> Self {
        match name {
            ProfileName::Paper => Profile::paper(),
            ProfileName::Desk => Profile::desk(),
            ProfileName::Mini => Profile::mini(),
        }
    }

    /// Same networks with a different box side (e.g. 64 instead of 96).
    pub fn with_box_size(mut self, box_size: usize) -> Result<Self> {
        self.grid = self.grid.with_box_size(box_size)?;
        Ok(self)
    }

    /// Convolution and max-pool counts of the localizer, head included.
    pub fn localizer_census(&self) -> (usize, usize) {
        let convs = self
            .localizer
            .iter()
            .map(|l| match l {
                LocLayer::Conv(_) => 1,
                LocLayer::Residual(_) => 2,
                LocLayer::MaxPool => 0,
            })
            .sum::<usize>();
        let pools = self.localizer.iter().filter(|l| **l == LocLayer::MaxPool).count();
        (convs + 1, pools)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Localizer,
    Segmenter,
    Classifier,
}

impl Task {
    pub fn group(&self) -> &'static str {
        match self {
            Task::Localizer => "localizer",
            Task::Segmenter => "segmenter",
            Task::Classifier => "classifier",
        }
    }
}

/// A built network. The graph emits logits (localizer, segmenter) or the raw
/// linear regression output (classifier).
#[derive(Clone, Debug)]
pub struct ModelSpec<T> {
    pub task: Task,
    pub graph: Graph<T>,
    /// Per-example input shape `[C, H, W]`.
    pub input_shape: Vec<usize>,
    /// Per-example output shape.
    pub output_shape: Vec<usize>,
}

impl<T: Scalar> ModelSpec<T> {
    pub fn cast<U: Scalar>(&self) -> ModelSpec<U> {
        ModelSpec {
            task: self.task,
            graph: self.graph.cast(),
            input_shape: self.input_shape.clone(),
            output_shape: self.output_shape.clone(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.ndim() != 4 || x.shape()[1..] != self.input_shape[..] {
            return Err(StenosisError::invalid(format!(
                "{} expects [N, {:?}] input, got {:?}",
                self.task.group(),
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Inference-mode forward on a batch `[N, C, H, W]`.
    pub fn forward_inference(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        Ok(self.graph.predict(std::slice::from_ref(x))?)
    }
}

struct Net<T: Scalar> {
    b: GraphBuilder<T>,
    count: usize,
}

impl<T: Scalar> Net<T> {
    fn name(&mut self, kind: &str) -> String {
        self.count += 1;
        format!("{kind}{}", self.count)
    }

    fn op(&mut self, kind: &str, op: OpKind, inputs: &[Source]) -> Result<Source> {
        let name = self.name(kind);
        Ok(self.b.node(&name, op, inputs)?)
    }

    fn conv(&mut self, x: Source, out: usize, kernel: usize, bias: bool) -> Result<Source> {
        let padding = (kernel - 1) / 2;
        self.op("conv", OpKind::Conv2d { out_channels: out, kernel, stride: 1, padding, bias }, &[x])
    }

    fn bn(&mut self, x: Source) -> Result<Source> {
        self.op("bn", OpKind::BatchNorm { eps: BN_EPS, momentum: BN_MOMENTUM }, &[x])
    }

    fn act(&mut self, x: Source) -> Result<Source> {
        self.op("lrelu", OpKind::LeakyRelu { slope: LEAKY_SLOPE }, &[x])
    }

    fn block(&mut self, x: Source, out: usize, kernel: usize) -> Result<Source> {
        let c = self.conv(x, out, kernel, false)?;
        let n = self.bn(c)?;
        self.act(n)
    }

    fn channels(&self, x: Source) -> usize {
        self.b.shape_of(x)[1]
    }

    fn side(&self, x: Source) -> usize {
        self.b.shape_of(x)[2]
    }
}

fn build_err(task: Task, msg: String) -> StenosisError {
    StenosisError::invalid(format!("cannot build {}: {msg}", task.group()))
}

/// YOLO-style fully convolutional localizer emitting `k×k` window logits.
pub fn build_localizer<T: Scalar>(profile: &Profile, seed: u64) -> Result<ModelSpec<T>> {
    let task = Task::Localizer;
    let grid = profile.grid;
    grid.validate()?;
    let mut net = Net { b: GraphBuilder::<T>::new(seed), count: 0 };
    net.b.set_group(task.group());
    let s = grid.image_size;
    let mut x = net.b.input(&[1, s, s]);
    for layer in &profile.localizer {
        x = match *layer {
            LocLayer::Conv(c) => net.block(x, c, 3)?,
            LocLayer::MaxPool => {
                if net.side(x) % 2 != 0 {
                    return Err(build_err(task, format!("odd side {} before pooling", net.side(x))));
                }
                net.op("maxpool", OpKind::MaxPool2d { size: 2, stride: 2 }, &[x])?
            }
            LocLayer::Residual(c) => {
                if net.channels(x) != c {
                    return Err(build_err(task, format!("residual width {c} after {} channels", net.channels(x))));
                }
                let h = net.block(x, c, 3)?;
                let h = net.conv(h, c, 3, false)?;
                let h = net.bn(h)?;
                let sum = net.op("add", OpKind::Add, &[h, x])?;
                net.act(sum)?
            }
        };
    }
    if net.side(x) != grid.n() {
        return Err(build_err(task, format!("features are {0}x{0}, need {1}x{1}", net.side(x), grid.n())));
    }
    let head = net.op("head", OpKind::Conv2d { out_channels: 1, kernel: 2, stride: 1, padding: 0, bias: true }, &[x])?;
    let k = grid.k();
    let graph = net.b.finish(head)?;
    if graph.output_shape() != [1, k, k] {
        return Err(build_err(task, format!("head emits {:?}, need [1, {k}, {k}]", graph.output_shape())));
    }
    Ok(ModelSpec { task, graph, input_shape: vec![1, s, s], output_shape: vec![1, k, k] })
}

/// Encoder–decoder with average-pooling encoder, skip concatenation and a
/// per-pixel logit head. Each decoder step is `1×1 reduce → 2× upsample →
/// concat skip → conv block`.
pub fn build_segmenter<T: Scalar>(profile: &Profile, seed: u64) -> Result<ModelSpec<T>> {
    let task = Task::Segmenter;
    let b = profile.grid.box_size;
    let filters = &profile.segmenter_filters;
    if filters.is_empty() {
        return Err(build_err(task, "no blocks".into()));
    }
    let depth = filters.len() - 1;
    if b % (1 << depth) != 0 {
        return Err(build_err(task, format!("side {b} not divisible by 2^{depth}")));
    }
    let mut net = Net { b: GraphBuilder::<T>::new(seed), count: 0 };
    net.b.set_group(task.group());
    let input = net.b.input(&[1, b, b]);
    let mut skips = Vec::with_capacity(filters.len());
    let mut x = input;
    for (i, &f) in filters.iter().enumerate() {
        if i > 0 {
            x = net.op("avgpool", OpKind::AvgPool2d { size: 2, stride: 2 }, &[x])?;
        }
        x = net.block(x, f, 3)?;
        skips.push(x);
    }
    for i in (0..depth).rev() {
        let f = filters[i];
        let r = net.block(x, f, 1)?;
        let up = net.op("upsample", OpKind::Upsample2x, &[r])?;
        let cat = net.op("concat", OpKind::ConcatChannels, &[up, skips[i]])?;
        x = net.block(cat, f, 3)?;
    }
    let head = net.conv(x, 1, 1, true)?;
    let graph = net.b.finish(head)?;
    Ok(ModelSpec { task, graph, input_shape: vec![1, b, b], output_shape: vec![1, b, b] })
}

/// Densely connected regressor over `[image, mask]` crops: every convolution
/// sees the concatenation of the input and all earlier outputs; global max
/// pooling and a linear unit produce the stenosis fraction.
pub fn build_classifier<T: Scalar>(profile: &Profile, seed: u64) -> Result<ModelSpec<T>> {
    let task = Task::Classifier;
    let b = profile.grid.box_size;
    if profile.classifier_channels.is_empty() {
        return Err(build_err(task, "no layers".into()));
    }
    let mut net = Net { b: GraphBuilder::<T>::new(seed), count: 0 };
    net.b.set_group(task.group());
    let mut stack = net.b.input(&[2, b, b]);
    for (i, &c) in profile.classifier_channels.iter().enumerate() {
        let out = net.block(stack, c, 3)?;
        stack = net.op("concat", OpKind::ConcatChannels, &[stack, out])?;
        if profile.classifier_pools.contains(&i) {
            if net.side(stack) % 2 != 0 {
                return Err(build_err(task, format!("odd side {} before pooling", net.side(stack))));
            }
            stack = net.op("maxpool", OpKind::MaxPool2d { size: 2, stride: 2 }, &[stack])?;
        }
    }
    let g = net.op("gmp", OpKind::GlobalMaxPool, &[stack])?;
    let d = net.op("fc", OpKind::Dense { out_features: 1, bias: true }, &[g])?;
    let graph = net.b.finish(d)?;
    Ok(ModelSpec { task, graph, input_shape: vec![2, b, b], output_shape: vec![1] })
}

pub fn build<T: Scalar>(task: Task, profile: &Profile, seed: u64) -> Result<ModelSpec<T>> {
    match task {
        Task::Localizer => build_localizer(profile, seed),
        Task::Segmenter => build_segmenter(profile, seed),
        Task::Classifier => build_classifier(profile, seed),
    }
}

/// Window probabilities for one `S×S` image.
pub fn predict_localizer<T: Scalar>(model: &ModelSpec<T>, image: &Tensor<T>) -> Result<ConfidenceGrid> {
    let x = as_batch(model, image)?;
    let out = model.forward_inference(&x)?;
    let k = model.output_shape[1];
    let values = out.data().iter().map(|&v| gradcore::ops::sigmoid(v.to_f64_lossy())).collect();
    ConfidenceGrid::new(k, values, Activation::Probabilities)
}

/// Soft lesion mask `[B, B]` for one crop.
pub fn predict_segmenter<T: Scalar>(model: &ModelSpec<T>, crop: &Tensor<T>) -> Result<Tensor<T>> {
    let x = as_batch(model, crop)?;
    let out = model.forward_inference(&x)?;
    let side = model.output_shape[1];
    Ok(out.map(gradcore::ops::sigmoid).reshape([side, side])?)
}

/// Raw (unclamped) stenosis fraction for one `[2, B, B]` input.
pub fn predict_classifier<T: Scalar>(model: &ModelSpec<T>, input: &Tensor<T>) -> Result<f64> {
    let x = as_batch(model, input)?;
    Ok(model.forward_inference(&x)?.item().to_f64_lossy())
}

/// Accepts `[H, W]`, `[C, H, W]` or `[1, C, H, W]` and returns a batch of one.
fn as_batch<T: Scalar>(model: &ModelSpec<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(&model.input_shape);
    if x.len() != shape.iter().product::<usize>() || x.shape()[x.ndim() - 1] != shape[3] {
        return Err(StenosisError::invalid(format!(
            "{} expects input {:?}, got {:?}",
            model.task.group(),
            model.input_shape,
            x.shape()
        )));
    }
    Ok(x.clone().reshape(shape)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn census_matches_profiles() {
        assert_eq!(Profile::paper().localizer_census(), (22, 5));
        assert_eq!(Profile::desk().localizer_census(), (8, 4));
        let loc = build_localizer::<f32>(&Profile::paper(), 0).unwrap();
        assert_eq!(loc.graph.count_ops("conv2d"), 22);
        assert_eq!(loc.graph.count_ops("max_pool2d"), 5);
        assert_eq!(loc.output_shape, vec![1, 15, 15]);
    }

    #[test]
    fn mini_shapes() {
        let p = Profile::mini();
        let loc = build_localizer::<f32>(&p, 1).unwrap();
        let grid = predict_localizer(&loc, &Tensor::from_fn([8, 8], |i| (i as f32 * 0.37).sin())).unwrap();
        assert_eq!(grid.side, 3);
        assert!(grid.values.iter().all(|&v| v > 0.0 && v < 1.0));
        let seg = build_segmenter::<f32>(&p, 1).unwrap();
        assert_eq!(predict_segmenter(&seg, &Tensor::zeros([4, 4])).unwrap().shape(), &[4, 4]);
        let cls = build_classifier::<f32>(&p, 1).unwrap();
        assert!(predict_classifier(&cls, &Tensor::zeros([2, 4, 4])).unwrap().is_finite());
        assert!(predict_classifier(&cls, &Tensor::zeros([1, 4, 4])).is_err());
    }

    #[test]
    fn unreachable_grid_is_rejected() {
        let mut p = Profile::desk();
        p.localizer.pop();
        p.localizer.pop();
        assert!(build_localizer::<f32>(&p, 0).is_err());
        let mut p = Profile::desk();
        p.segmenter_filters = vec![4; 7];
        assert!(build_segmenter::<f32>(&p, 0).is_err());
    }

    #[test]
    fn segmenter_pools_by_averaging() {
        let seg = build_segmenter::<f32>(&Profile::desk(), 0).unwrap();
        assert_eq!(seg.graph.count_ops("avg_pool2d"), 3);
        assert_eq!(seg.graph.count_ops("max_pool2d"), 0);
        let cls = build_classifier::<f32>(&Profile::desk(), 0).unwrap();
        assert_eq!(cls.graph.count_ops("conv2d"), 5);
        assert_eq!(cls.graph.count_ops("global_max_pool"), 1);
        assert!(cls.graph.trainable_param_count() < 200_000, "{}", cls.graph.trainable_param_count());
    }
}
