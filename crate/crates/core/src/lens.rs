use std::collections::BTreeMap;

use featlens_tensor::{Graph, ParamSet, Real, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{scaled_extent, CanvasPolicy};
use crate::error::{Error, Result};
use crate::host::{FrozenHost, HostConfig, Taps};
use crate::transform::LensBin;

/// Rotates the spatial grid of NCHW features by `-input_angle_deg`, undoing
/// a counter-clockwise rotation of the input image.
pub fn dual_rotate_features(features: &Tensor, input_angle_deg: u32) -> Result<Tensor> {
    let turns = quarter_turns_of(input_angle_deg)?;
    let (_, _, h, w) = features.dims4()?;
    if turns % 2 == 1 && h != w {
        return Err(Error::config(format!("cannot rotate a {h}x{w} map by a quarter turn")));
    }
    Ok(features.rot90((4 - turns) % 4)?)
}

fn quarter_turns_of(angle: u32) -> Result<usize> {
    match angle {
        0 | 90 | 180 | 270 => Ok(angle as usize / 90),
        other => Err(Error::UnbinnedAngle(other as f64)),
    }
}

/// Graph form of [`dual_rotate_features`] for an input rotated by
/// `quarter_turns` counter-clockwise quarter turns.
pub fn dual_rotate<T: Real>(g: &mut Graph<T>, features: Var, quarter_turns: usize) -> Result<Var> {
    let k = quarter_turns % 4;
    if k == 0 {
        return Ok(features);
    }
    let s = g.shape(features);
    if k % 2 == 1 && s.len() == 4 && s[2] != s[3] {
        return Err(Error::config(format!("cannot rotate a {}x{} map by a quarter turn", s[2], s[3])));
    }
    Ok(g.rot90(features, 4 - k)?)
}

/// One 1x1 convolution producing `groups * out` channels, split into
/// `groups` consecutive maps of `out` channels.
pub fn multigroup_conv<T: Real>(
    g: &mut Graph<T>,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    groups: usize,
) -> Result<Vec<Var>> {
    let ws = g.shape(weight).to_vec();
    if groups == 0 || ws.len() != 4 || ws[0] % groups != 0 || ws[2] != 1 || ws[3] != 1 {
        return Err(Error::config(format!(
            "multigroup kernel {ws:?} does not split into {groups} 1x1 groups"
        )));
    }
    let all = g.conv2d(input, weight, bias, 1, 0)?;
    let out = ws[0] / groups;
    (0..groups)
        .map(|m| Ok(g.slice_channels(all, m * out, out)?))
        .collect()
}

/// Per coordinate, the softmax-weighted average of the group values
/// (weights are the softmax of those same values).
pub fn self_attentive_sum<T: Real>(g: &mut Graph<T>, groups: &[Var]) -> Result<Var> {
    let first = *groups
        .first()
        .ok_or_else(|| Error::config("self-attentive sum of zero groups"))?;
    if groups.len() == 1 {
        return Ok(first);
    }
    let shape = g.shape(first).to_vec();
    for &v in &groups[1..] {
        if g.shape(v) != shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "self_attentive_sum",
                expected: format!("{shape:?}"),
                got: format!("{:?}", g.shape(v)),
            }
            .into());
        }
    }
    let values: Vec<&[T]> = groups.iter().map(|&v| g.value(v).data()).collect();
    let n = values[0].len();
    let mut out = vec![T::zero(); n];
    let mut weights = vec![T::zero(); groups.len()];
    for (i, o) in out.iter_mut().enumerate() {
        *o = attend(&values, i, &mut weights);
    }
    let output = Tensor::new(shape, out)?;
    let var = g.custom(
        "self_attentive_sum",
        groups,
        output,
        |inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>| {
            let values: Vec<&[T]> = inputs.iter().map(|t| t.data()).collect();
            let mut grads: Vec<Vec<T>> = vec![vec![T::zero(); grad.numel()]; inputs.len()];
            let mut weights = vec![T::zero(); inputs.len()];
            for (i, (&go, &y)) in grad.data().iter().zip(output.data()).enumerate() {
                attend(&values, i, &mut weights);
                // dY/dv_m = s_m * (1 + v_m - Y)
                for (m, gm) in grads.iter_mut().enumerate() {
                    gm[i] = go * weights[m] * (T::one() + values[m][i] - y);
                }
            }
            grads
                .into_iter()
                .map(|gm| Ok(Some(Tensor::new(grad.shape().to_vec(), gm)?)))
                .collect()
        },
    )?;
    Ok(var)
}

fn attend<T: Real>(values: &[&[T]], i: usize, weights: &mut [T]) -> T {
    let max = values.iter().map(|v| v[i]).fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for (w, v) in weights.iter_mut().zip(values) {
        *w = (v[i] - max).exp();
        z = z + *w;
    }
    let mut y = T::zero();
    for (w, v) in weights.iter_mut().zip(values) {
        *w = *w / z;
        y = y + *w * v[i];
    }
    y
}

/// How lens kernels start out.
#[derive(Clone, Debug)]
pub enum LensInit {
    /// Groups start as the host's closing 1x1 convolution on the `x2`
    /// channels plus an identity pass of the `x0` channels; with `M >= 2`
    /// only the first `ceil(M/2)` do and the rest start at zero, so the
    /// initial output is a smooth ReLU of the host's pre-activation block
    /// output. `noise` is the std of a perturbation that separates the
    /// groups.
    HostSurrogate {
        conv3_weight: Tensor,
        conv3_bias: Tensor,
        noise: f64,
    },
    /// Zero-mean normal weights with the given std, zero bias.
    Random { std: f64 },
}

impl LensInit {
    pub fn from_host(host: &FrozenHost, noise: f64) -> Result<LensInit> {
        let p = host.host().params();
        Ok(LensInit::HostSurrogate {
            conv3_weight: p.get("block.conv3.weight")?.clone(),
            conv3_bias: p.get("block.conv3.bias")?.clone(),
            noise,
        })
    }
}

/// Channel layout a lens consumes and produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LensShape {
    pub x2_channels: usize,
    pub x0_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
}

impl LensShape {
    pub fn for_host(config: &HostConfig, groups: usize) -> LensShape {
        LensShape {
            x2_channels: config.bottleneck_width,
            x0_channels: config.block_width(),
            out_channels: config.block_width(),
            groups,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.x2_channels + self.x0_channels
    }
}

fn multigroup_params(
    params: &mut ParamSet,
    prefix: &str,
    shape: &LensShape,
    init: &LensInit,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if shape.groups == 0 {
        return Err(Error::config("a lens needs at least one group"));
    }
    let (cin, cout, m) = (shape.in_channels(), shape.out_channels, shape.groups);
    let mut weight = vec![0.0f32; m * cout * cin];
    let mut bias = vec![0.0f32; m * cout];
    match init {
        LensInit::HostSurrogate {
            conv3_weight,
            conv3_bias,
            noise,
        } => {
            let ok = conv3_weight.shape() == [cout, shape.x2_channels, 1, 1]
                && conv3_bias.shape() == [cout]
                && shape.x0_channels == cout;
            if !ok {
                return Err(Error::config(format!(
                    "host surrogate init needs conv3 {:?} -> {cout} channels and x0 width {cout}",
                    conv3_weight.shape()
                )));
            }
            let dist = Normal::new(0.0, *noise).map_err(|e| Error::config(e.to_string()))?;
            // With two or more groups, the upper half starts near zero so the
            // soft max over groups approximates the block's closing ReLU.
            let copies = if m >= 2 { m.div_ceil(2) } else { m };
            for g in 0..m {
                for o in 0..cout {
                    let row = &mut weight[(g * cout + o) * cin..(g * cout + o + 1) * cin];
                    if g < copies {
                        row[..shape.x2_channels]
                            .copy_from_slice(&conv3_weight.data()[o * shape.x2_channels..(o + 1) * shape.x2_channels]);
                        row[shape.x2_channels + o] = 1.0;
                        bias[g * cout + o] = conv3_bias.data()[o];
                    }
                    for v in row.iter_mut() {
                        *v += dist.sample(rng) as f32;
                    }
                }
            }
        }
        LensInit::Random { std } => {
            let dist = Normal::new(0.0, *std).map_err(|e| Error::config(e.to_string()))?;
            weight.iter_mut().for_each(|v| *v = dist.sample(rng) as f32);
        }
    }
    params.insert(format!("{prefix}mg.weight"), Tensor::new(vec![m * cout, cin, 1, 1], weight)?)?;
    params.insert(format!("{prefix}mg.bias"), Tensor::new(vec![m * cout], bias)?)?;
    Ok(())
}

/// Concatenation, optional dual rotation, multigroup conv and self-attentive
/// sum, reading parameters `{prefix}mg.*`.
fn group_lens_forward(
    g: &mut Graph,
    params: &ParamSet,
    prefix: &str,
    groups: usize,
    quarter_turns: usize,
    x2: Var,
    x0: Var,
) -> Result<Var> {
    let cat = g.concat_channels(&[x2, x0])?;
    let aligned = dual_rotate(g, cat, quarter_turns)?;
    let w = params.bind(g, &format!("{prefix}mg.weight"))?;
    let b = params.bind(g, &format!("{prefix}mg.bias"))?;
    let maps = multigroup_conv(g, aligned, w, Some(b), groups)?;
    self_attentive_sum(g, &maps)
}

/// Reconstructs upright block features from the taps of a rotated input.
#[derive(Clone, Debug)]
pub struct RotationLens {
    bin: LensBin,
    shape: LensShape,
    params: ParamSet,
}

impl RotationLens {
    pub fn new(bin: LensBin, shape: LensShape, init: &LensInit, seed: u64) -> Result<RotationLens> {
        if bin.quarter_turns().is_none() {
            return Err(Error::config(format!("{bin} is not a rotation bin")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        multigroup_params(&mut params, "", &shape, init, &mut rng)?;
        Ok(RotationLens { bin, shape, params })
    }

    pub fn bin(&self) -> LensBin {
        self.bin
    }

    pub fn shape(&self) -> &LensShape {
        &self.shape
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward(&self, g: &mut Graph, x2: Var, x0: Var) -> Result<Var> {
        let turns = self.bin.quarter_turns().expect("checked at construction");
        group_lens_forward(g, &self.params, "", self.shape.groups, turns, x2, x0)
    }
}

/// Reconstructs full-size block features from the taps of a downscaled
/// input: an embedded group lens upsampled by a transposed convolution,
/// mixed convexly with the bilinearly upsampled closing-conv output.
#[derive(Clone, Debug)]
pub struct ScalingLens {
    bin: LensBin,
    shape: LensShape,
    stride: usize,
    target_hw: (usize, usize),
    window: Option<(usize, usize, usize, usize)>,
    params: ParamSet,
}

/// Feature-grid window covering the resized content of a padded input,
/// as `(top, left, h, w)`.
pub fn content_window(feature_hw: (usize, usize), input_hw: (usize, usize), scale: f64) -> (usize, usize, usize, usize) {
    let side = |feat: usize, input: usize| {
        let content = scaled_extent(input, scale);
        let size = ((feat * content) as f64 / input as f64).ceil() as usize;
        let size = size.clamp(1, feat);
        ((feat - size) / 2, size)
    };
    let (top, h) = side(feature_hw.0, input_hw.0);
    let (left, w) = side(feature_hw.1, input_hw.1);
    (top, left, h, w)
}

impl ScalingLens {
    /// `feature_hw` and `input_hw` describe the host; `policy` says whether
    /// scaled inputs arrive padded (taps are cropped to the content window)
    /// or shrunk (taps are used whole).
    pub fn new(
        bin: LensBin,
        shape: LensShape,
        host: &HostConfig,
        policy: CanvasPolicy,
        init: &LensInit,
        seed: u64,
    ) -> Result<ScalingLens> {
        let scale = match bin.spec() {
            crate::transform::TransformSpec::Scaling { scale } if bin.is_scaling() => scale,
            _ => return Err(Error::config(format!("{bin} is not a scaling bin"))),
        };
        let stride = (1.0 / scale).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        multigroup_params(&mut params, "emb.", &shape, init, &mut rng)?;
        let c = shape.out_channels;
        let mut up = vec![0.0f32; c * c * stride * stride];
        // nearest-neighbour upsampling to start with
        for ch in 0..c {
            let base = (ch * c + ch) * stride * stride;
            up[base..base + stride * stride].iter_mut().for_each(|v| *v = 1.0);
        }
        params.insert("up.weight", Tensor::new(vec![c, c, stride, stride], up)?)?;
        params.insert("mix.alpha", Tensor::scalar(0.0))?;
        let feature_hw = host.feature_hw();
        let window = match policy {
            CanvasPolicy::PadToCanvas => Some(content_window(feature_hw, host.input_hw, scale)),
            CanvasPolicy::Shrink => None,
        };
        Ok(ScalingLens {
            bin,
            shape,
            stride,
            target_hw: feature_hw,
            window,
            params,
        })
    }

    pub fn bin(&self) -> LensBin {
        self.bin
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn target_hw(&self) -> (usize, usize) {
        self.target_hw
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Restricts taps of a scaled input to the region this lens reads.
    pub fn prepare_taps(&self, taps: &Taps) -> Result<Taps> {
        match self.window {
            Some((t, l, h, w)) => taps.crop(t, l, h, w),
            None => Ok(taps.clone()),
        }
    }

    /// Current mixing weights `(w1, w2)`.
    pub fn weights(&self) -> Result<(f32, f32)> {
        let a = self.params.get("mix.alpha")?.item()?;
        let w1 = 1.0 / (1.0 + (-a).exp());
        Ok((w1, 1.0 - w1))
    }

    pub fn forward(&self, g: &mut Graph, x2: Var, x0: Var, x3: Var) -> Result<Var> {
        let src = g.shape(x3).to_vec();
        if src.len() != 4 || src[2] > self.target_hw.0 || src[3] > self.target_hw.1 {
            return Err(Error::config(format!(
                "scaling lens maps smaller inputs up to {:?}, got {src:?}",
                self.target_hw
            )));
        }
        let emb = group_lens_forward(g, &self.params, "emb.", self.shape.groups, 0, x2, x0)?;
        let k = self.params.bind(g, "up.weight")?;
        let up = g.transposed_conv2d(emb, k, self.stride, self.target_hw)?;
        let residual = g.bilinear_resize(x3, self.target_hw)?;
        mix(g, &self.params, up, residual)
    }
}

fn mix(g: &mut Graph, params: &ParamSet, a: Var, b: Var) -> Result<Var> {
    let alpha = params.bind(g, "mix.alpha")?;
    let w1 = g.sigmoid(alpha)?;
    let w2 = g.affine(w1, -1.0, 1.0)?;
    let left = g.scale(a, w1)?;
    let right = g.scale(b, w2)?;
    Ok(g.add(left, right)?)
}

#[derive(Clone, Debug)]
pub enum Lens {
    Rotation(RotationLens),
    Scaling(ScalingLens),
}

impl Lens {
    pub fn bin(&self) -> LensBin {
        match self {
            Lens::Rotation(l) => l.bin(),
            Lens::Scaling(l) => l.bin(),
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Lens::Rotation(l) => l.params(),
            Lens::Scaling(l) => l.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Lens::Rotation(l) => l.params_mut(),
            Lens::Scaling(l) => l.params_mut(),
        }
    }

    /// Taps as this lens expects to read them.
    pub fn prepare_taps(&self, taps: &Taps) -> Result<Taps> {
        match self {
            Lens::Rotation(_) => Ok(taps.clone()),
            Lens::Scaling(l) => l.prepare_taps(taps),
        }
    }

    /// Lens output for prepared taps already recorded in `g`.
    pub fn forward(&self, g: &mut Graph, x2: Var, x0: Var, x3: Var) -> Result<Var> {
        match self {
            Lens::Rotation(l) => l.forward(g, x2, x0),
            Lens::Scaling(l) => l.forward(g, x2, x0, x3),
        }
    }

    /// Reconstructed features for a batch of raw taps.
    pub fn apply(&self, taps: &Taps) -> Result<Tensor> {
        let t = self.prepare_taps(taps)?;
        let mut g = Graph::new();
        let x2 = g.constant(t.x2);
        let x0 = g.constant(t.x0);
        let x3 = g.constant(t.x3);
        let y = self.forward(&mut g, x2, x0, x3)?;
        Ok(g.value(y).clone())
    }
}

/// One lens per non-identity bin; the identity bin always passes features
/// through untouched.
#[derive(Clone, Debug, Default)]
pub struct LensRegistry {
    lenses: BTreeMap<LensBin, Lens>,
}

impl LensRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, lens: Lens) -> Result<()> {
        let bin = lens.bin();
        if bin == LensBin::Identity {
            return Err(Error::config("the identity bin is a fixed pass-through"));
        }
        if self.lenses.insert(bin, lens).is_some() {
            return Err(Error::config(format!("two lenses for bin {bin}")));
        }
        Ok(())
    }

    /// `Ok(None)` for the identity pass-through.
    pub fn resolve(&self, bin: LensBin) -> Result<Option<&Lens>> {
        if bin == LensBin::Identity {
            return Ok(None);
        }
        self.lenses
            .get(&bin)
            .map(Some)
            .ok_or_else(|| Error::UnresolvedBin(bin.name().into()))
    }

    pub fn bins(&self) -> impl Iterator<Item = LensBin> + '_ {
        self.lenses.keys().copied()
    }
}

/// Linear rotation-type classifier over pooled lens inputs.
#[derive(Clone, Debug)]
pub struct RotationClassifier {
    params: ParamSet,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationPrediction {
    pub bin: LensBin,
    /// Over identity, rot90, rot180, rot270.
    pub probs: [f32; 4],
}

impl RotationClassifier {
    /// Zero-initialized, hence uniform before training.
    pub fn new(in_channels: usize) -> Result<RotationClassifier> {
        let mut params = ParamSet::new();
        params.insert("weight", Tensor::zeros(vec![4, in_channels]))?;
        params.insert("bias", Tensor::zeros(vec![4]))?;
        Ok(RotationClassifier { params })
    }

    pub fn from_params(params: ParamSet) -> Result<RotationClassifier> {
        let w = params.get("weight")?;
        if w.rank() != 2 || w.shape()[0] != 4 || params.get("bias")?.shape() != [4] {
            return Err(Error::config("rotation classifier needs a 4-way weight and bias"));
        }
        Ok(RotationClassifier { params })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn logits(&self, g: &mut Graph, x2: Var, x0: Var) -> Result<Var> {
        let cat = g.concat_channels(&[x2, x0])?;
        let pooled = g.global_avg_pool(cat)?;
        let w = self.params.bind(g, "weight")?;
        let b = self.params.bind(g, "bias")?;
        Ok(g.fully_connected(pooled, w, Some(b))?)
    }

    pub fn predict(&self, taps: &Taps) -> Result<Vec<RotationPrediction>> {
        let mut g = Graph::new();
        let x2 = g.constant(taps.x2.clone());
        let x0 = g.constant(taps.x0.clone());
        let l = self.logits(&mut g, x2, x0)?;
        let p = g.softmax(l)?;
        Ok(g
            .value(p)
            .data()
            .chunks(4)
            .map(|row| {
                let probs = [row[0], row[1], row[2], row[3]];
                let best = argmax(&probs);
                RotationPrediction {
                    bin: LensBin::from_rotation_class(best).expect("four classes"),
                    probs,
                }
            })
            .collect())
    }
}

/// Index of the largest value; the first wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// How the pipeline picks a lens per sample.
#[derive(Clone, Copy, Debug)]
pub enum Selection<'a> {
    /// Known bins, one per sample.
    Given(&'a [LensBin]),
    /// Bins predicted from the taps.
    Predicted(&'a RotationClassifier),
    /// No lens: plain host logits.
    Off,
}

/// Logits of `batch` with each sample's features passed through the lens of
/// its bin before the frozen classifier head. Identity samples keep the
/// host's logits untouched.
pub fn apply_lens_pipeline(
    host: &FrozenHost,
    registry: &LensRegistry,
    batch: &Tensor,
    selection: Selection<'_>,
) -> Result<Tensor> {
    let (logits, taps) = host.forward_with_taps(batch)?;
    let n = logits.shape()[0];
    let bins: Vec<LensBin> = match selection {
        Selection::Off => return Ok(logits),
        Selection::Given(b) => {
            if b.len() != n {
                return Err(Error::config(format!("{} bins for {n} samples", b.len())));
            }
            b.to_vec()
        }
        Selection::Predicted(clf) => clf.predict(&taps)?.into_iter().map(|p| p.bin).collect(),
    };
    let classes = logits.shape()[1];
    let mut out = logits.into_data();
    let mut seen: Vec<LensBin> = bins.clone();
    seen.sort();
    seen.dedup();
    for bin in seen {
        let Some(lens) = registry.resolve(bin)? else { continue };
        let idx: Vec<usize> = (0..n).filter(|&i| bins[i] == bin).collect();
        let sub = Taps {
            x0: taps.x0.select_batch(&idx)?,
            x2: taps.x2.select_batch(&idx)?,
            x3: taps.x3.select_batch(&idx)?,
            out: taps.out.select_batch(&idx)?,
        };
        let y = lens.apply(&sub)?;
        let l = host.logits_from_features(&y)?;
        for (row, &i) in l.data().chunks(classes).zip(&idx) {
            out[i * classes..(i + 1) * classes].copy_from_slice(row);
        }
    }
    Ok(Tensor::new(vec![n, classes], out)?)
}
