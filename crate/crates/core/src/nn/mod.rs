//! A small feed-forward stack with hand-written backpropagation.
//!
//! Networks are an ordered list of layers over NHWC activations flattened
//! into rows. Exactly one layer is the feature tap; its output is the
//! penultimate feature taken before the final ReLU, which is what
//! distillation regresses onto. Downstream of the tap only a ReLU and/or a
//! linear classifier head may follow.

mod gradcheck;

pub use gradcheck::{grad_check, GradCheckReport, KINK_BAND, KINK_NUDGE};

use crate::data::{InputShape, Section, TensorContainer};
use crate::error::{Error, Result};
use crate::linalg::FeatureMatrix;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Dense { inputs: usize, outputs: usize },
    /// 3x3 convolution, stride 1, zero padding 1.
    Conv3x3 { in_ch: usize, out_ch: usize },
    Relu,
    /// Global average pool, image to per-channel vector.
    Gap,
    LinearHead { inputs: usize, classes: usize },
}

impl Layer {
    fn tag(&self) -> [i64; 3] {
        match *self {
            Layer::Dense { inputs, outputs } => [1, inputs as i64, outputs as i64],
            Layer::Conv3x3 { in_ch, out_ch } => [2, in_ch as i64, out_ch as i64],
            Layer::Relu => [3, 0, 0],
            Layer::Gap => [4, 0, 0],
            Layer::LinearHead { inputs, classes } => [5, inputs as i64, classes as i64],
        }
    }

    fn from_tag(t: &[i64]) -> Result<Self> {
        let (a, b) = (t[1] as usize, t[2] as usize);
        Ok(match t[0] {
            1 => Layer::Dense { inputs: a, outputs: b },
            2 => Layer::Conv3x3 { in_ch: a, out_ch: b },
            3 => Layer::Relu,
            4 => Layer::Gap,
            5 => Layer::LinearHead { inputs: a, classes: b },
            k => return Err(Error::format(0, format!("unknown layer tag {k}"))),
        })
    }

    fn param_count(&self) -> usize {
        match *self {
            Layer::Dense { inputs, outputs } => inputs * outputs + outputs,
            Layer::LinearHead { inputs, classes } => inputs * classes + classes,
            Layer::Conv3x3 { in_ch, out_ch } => 9 * in_ch * out_ch + out_ch,
            Layer::Relu | Layer::Gap => 0,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Layer::Dense { inputs, .. } | Layer::LinearHead { inputs, .. } => inputs,
            Layer::Conv3x3 { in_ch, .. } => 9 * in_ch,
            Layer::Relu | Layer::Gap => 0,
        }
    }

    /// Number of weights, which come before the biases in each layer's block.
    fn weight_count(&self) -> usize {
        match *self {
            Layer::Dense { inputs, outputs } => inputs * outputs,
            Layer::LinearHead { inputs, classes } => inputs * classes,
            Layer::Conv3x3 { in_ch, out_ch } => 9 * in_ch * out_ch,
            Layer::Relu | Layer::Gap => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input: InputShape,
    pub layers: Vec<Layer>,
    /// Index of the layer whose output is the feature.
    pub tap: usize,
}

impl NetworkSpec {
    /// `dense(in, h1), relu, ..., dense(h_last, feature_dim) [tap], relu, head`.
    /// Without `classes` the network ends at the final ReLU.
    pub fn mlp(input_dim: usize, hidden: &[usize], feature_dim: usize, classes: Option<usize>) -> Self {
        let mut layers = Vec::new();
        let mut width = input_dim;
        for &h in hidden {
            layers.push(Layer::Dense { inputs: width, outputs: h });
            layers.push(Layer::Relu);
            width = h;
        }
        layers.push(Layer::Dense { inputs: width, outputs: feature_dim });
        let tap = layers.len() - 1;
        layers.push(Layer::Relu);
        if let Some(c) = classes {
            layers.push(Layer::LinearHead { inputs: feature_dim, classes: c });
        }
        NetworkSpec {
            input: InputShape::Vector(input_dim),
            layers,
            tap,
        }
    }

    /// `conv3x3 (+relu) ..., gap, dense(c_last, feature_dim) [tap], relu, head`.
    /// The last convolution feeds the pool directly.
    pub fn conv(h: usize, w: usize, ch: usize, conv_channels: &[usize], feature_dim: usize, classes: Option<usize>) -> Self {
        let mut layers = Vec::new();
        let mut c = ch;
        for (i, &oc) in conv_channels.iter().enumerate() {
            layers.push(Layer::Conv3x3 { in_ch: c, out_ch: oc });
            if i + 1 < conv_channels.len() {
                layers.push(Layer::Relu);
            }
            c = oc;
        }
        layers.push(Layer::Gap);
        layers.push(Layer::Dense { inputs: c, outputs: feature_dim });
        let tap = layers.len() - 1;
        layers.push(Layer::Relu);
        if let Some(k) = classes {
            layers.push(Layer::LinearHead { inputs: feature_dim, classes: k });
        }
        NetworkSpec {
            input: InputShape::Image { h, w, ch },
            layers,
            tap,
        }
    }

    /// Shape flowing into each layer plus the final output shape.
    pub fn shapes(&self) -> Result<Vec<InputShape>> {
        if self.layers.is_empty() {
            return Err(Error::Spec("network has no layers".into()));
        }
        if self.input.flat_len() == 0 {
            return Err(Error::Spec("input has zero size".into()));
        }
        let mut shapes = vec![self.input];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = *shapes.last().unwrap();
            let bad = |why: String| Error::Spec(format!("layer {i} ({layer:?}): {why}"));
            let next = match (*layer, cur) {
                (Layer::Dense { inputs, outputs }, InputShape::Vector(d))
                | (Layer::LinearHead { inputs, classes: outputs }, InputShape::Vector(d)) => {
                    if inputs != d {
                        return Err(bad(format!("expects width {inputs}, receives {d}")));
                    }
                    if outputs == 0 {
                        return Err(bad("zero outputs".into()));
                    }
                    InputShape::Vector(outputs)
                }
                (Layer::Conv3x3 { in_ch, out_ch }, InputShape::Image { h, w, ch }) => {
                    if in_ch != ch {
                        return Err(bad(format!("expects {in_ch} channels, receives {ch}")));
                    }
                    if out_ch == 0 {
                        return Err(bad("zero output channels".into()));
                    }
                    InputShape::Image { h, w, ch: out_ch }
                }
                (Layer::Gap, InputShape::Image { ch, .. }) => InputShape::Vector(ch),
                (Layer::Relu, s) => s,
                (_, s) => return Err(bad(format!("cannot consume {s}"))),
            };
            if matches!(layer, Layer::LinearHead { .. }) && i + 1 != self.layers.len() {
                return Err(bad("linear head must be the last layer".into()));
            }
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<Vec<InputShape>> {
        let shapes = self.shapes()?;
        let tap = self.tap;
        if tap >= self.layers.len() {
            return Err(Error::Spec(format!("tap {tap} is out of range")));
        }
        if !matches!(self.layers[tap], Layer::Dense { .. } | Layer::Gap | Layer::Conv3x3 { .. }) {
            return Err(Error::Spec("tap must be a dense, conv or pooling output".into()));
        }
        if !matches!(shapes[tap + 1], InputShape::Vector(_)) {
            return Err(Error::Spec("tap output must be a vector".into()));
        }
        let after: Vec<Layer> = self.layers[tap + 1..].to_vec();
        let ok = matches!(
            after.as_slice(),
            [] | [Layer::Relu] | [Layer::LinearHead { .. }] | [Layer::Relu, Layer::LinearHead { .. }]
        );
        if !ok {
            return Err(Error::Spec(
                "only a ReLU and/or a linear head may follow the feature tap".into(),
            ));
        }
        Ok(shapes)
    }

    pub fn feature_dim(&self) -> usize {
        match self.shapes().ok().and_then(|s| s.get(self.tap + 1).copied()) {
            Some(InputShape::Vector(d)) => d,
            _ => 0,
        }
    }

    pub fn classes(&self) -> Option<usize> {
        match self.layers.last() {
            Some(Layer::LinearHead { classes, .. }) => Some(*classes),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        let mut acc = 0;
        out.push(0);
        for l in &self.layers {
            acc += l.param_count();
            out.push(acc);
        }
        out
    }

    /// Same backbone with the classifier head replaced (or added).
    pub fn with_head(&self, classes: usize) -> NetworkSpec {
        let mut layers = self.layers.clone();
        if matches!(layers.last(), Some(Layer::LinearHead { .. })) {
            layers.pop();
        }
        if !matches!(layers.last(), Some(Layer::Relu)) {
            layers.push(Layer::Relu);
        }
        layers.push(Layer::LinearHead {
            inputs: self.feature_dim(),
            classes,
        });
        NetworkSpec {
            input: self.input,
            layers,
            tap: self.tap,
        }
    }

    fn encode(&self) -> Vec<i64> {
        let mut out = match self.input {
            InputShape::Vector(d) => vec![0, d as i64, 0, 0],
            InputShape::Image { h, w, ch } => vec![1, h as i64, w as i64, ch as i64],
        };
        out.push(self.tap as i64);
        out.push(self.layers.len() as i64);
        for l in &self.layers {
            out.extend(l.tag());
        }
        out
    }

    fn decode(v: &[i64]) -> Result<Self> {
        let bad = || Error::format(0, "malformed network spec section");
        if v.len() < 6 {
            return Err(bad());
        }
        let input = match v[0] {
            0 => InputShape::Vector(v[1] as usize),
            1 => InputShape::Image {
                h: v[1] as usize,
                w: v[2] as usize,
                ch: v[3] as usize,
            },
            _ => return Err(bad()),
        };
        let n = v[5] as usize;
        if v.len() != 6 + 3 * n {
            return Err(bad());
        }
        let layers = v[6..]
            .chunks_exact(3)
            .map(Layer::from_tag)
            .collect::<Result<Vec<_>>>()?;
        Ok(NetworkSpec {
            input,
            layers,
            tap: v[4] as usize,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: Vec<f64>,
    pub seed: u64,
}

/// Activations saved by [`Network::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    /// `acts[i]` is the input of layer `i`; the last entry is the output.
    acts: Vec<Vec<f64>>,
    shapes: Vec<InputShape>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Input to layer `i` (flattened rows).
    pub fn layer_input(&self, i: usize) -> &[f64] {
        &self.acts[i]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub features: FeatureMatrix,
    pub logits: Option<FeatureMatrix>,
    pub cache: ForwardCache,
}

pub fn init_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    Network::init(spec.clone(), seed)
}

impl Network {
    /// He-normal weights, `N(0, 2 / fan_in)`, from `seed`; zero biases.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(seed);
        let mut params = Vec::with_capacity(spec.param_count());
        for layer in &spec.layers {
            let std = if layer.fan_in() > 0 {
                (2.0 / layer.fan_in() as f64).sqrt()
            } else {
                0.0
            };
            params.extend((0..layer.weight_count()).map(|_| std * rng.normal()));
            params.extend(std::iter::repeat(0.0).take(layer.param_count() - layer.weight_count()));
        }
        Ok(Network { spec, params, seed })
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<f64>, seed: u64) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::Spec(format!(
                "spec needs {} parameters, got {}",
                spec.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite network parameter".into()));
        }
        Ok(Network { spec, params, seed })
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    /// First parameter index of the classifier head, or the total count when
    /// there is no head.
    pub fn head_offset(&self) -> usize {
        let offsets = self.spec.offsets();
        match self.spec.layers.last() {
            Some(Layer::LinearHead { .. }) => offsets[self.spec.layers.len() - 1],
            _ => self.params.len(),
        }
    }

    pub fn forward(&self, batch: &FeatureMatrix) -> Result<ForwardOutput> {
        let shapes = self.spec.validate()?;
        if batch.cols() != self.spec.input.flat_len() {
            return Err(Error::Shape(format!(
                "network input is {} ({} values), batch rows have {}",
                self.spec.input,
                self.spec.input.flat_len(),
                batch.cols()
            )));
        }
        let b = batch.rows();
        let offsets = self.spec.offsets();
        let mut acts = Vec::with_capacity(self.spec.layers.len() + 1);
        acts.push(batch.values().to_vec());
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let p = &self.params[offsets[i]..offsets[i + 1]];
            let x = acts.last().unwrap();
            let y = layer_forward(layer, p, x, b, shapes[i]);
            acts.push(y);
        }
        let feature_dim = shapes[self.spec.tap + 1].flat_len();
        let features = FeatureMatrix::checked(b, feature_dim, acts[self.spec.tap + 1].clone())?;
        let logits = match self.spec.classes() {
            Some(c) => Some(FeatureMatrix::checked(b, c, acts.last().unwrap().clone())?),
            None => None,
        };
        Ok(ForwardOutput {
            features,
            logits,
            cache: ForwardCache {
                batch: b,
                acts,
                shapes,
            },
        })
    }

    /// Gradient of the loss with respect to every parameter, given the loss
    /// gradient at the tapped features and/or the logits. Parameters are not
    /// modified.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        feature_grad: Option<&FeatureMatrix>,
        logit_grad: Option<&FeatureMatrix>,
    ) -> Result<Vec<f64>> {
        let b = cache.batch;
        let tap = self.spec.tap;
        let n_layers = self.spec.layers.len();
        let feat_len = cache.shapes[tap + 1].flat_len();
        if let Some(g) = feature_grad {
            if g.shape() != (b, feat_len) {
                return Err(Error::Shape(format!(
                    "feature gradient {:?}, features are {:?}",
                    g.shape(),
                    (b, feat_len)
                )));
            }
        }
        let mut grads = vec![0.0; self.params.len()];
        let (start, mut g) = match logit_grad {
            Some(lg) => {
                let classes = self
                    .spec
                    .classes()
                    .ok_or_else(|| Error::Shape("network has no logits".into()))?;
                if lg.shape() != (b, classes) {
                    return Err(Error::Shape(format!(
                        "logit gradient {:?}, logits are {:?}",
                        lg.shape(),
                        (b, classes)
                    )));
                }
                (n_layers - 1, lg.values().to_vec())
            }
            None => (tap, vec![0.0; b * feat_len]),
        };
        let offsets = self.spec.offsets();
        for i in (0..=start).rev() {
            if i == tap {
                if let Some(fg) = feature_grad {
                    g.iter_mut().zip(fg.values()).for_each(|(a, v)| *a += v);
                }
            }
            let layer = &self.spec.layers[i];
            let (lo, hi) = (offsets[i], offsets[i + 1]);
            let need_input_grad = i > 0;
            g = layer_backward(
                layer,
                &self.params[lo..hi],
                &mut grads[lo..hi],
                &cache.acts[i],
                &g,
                b,
                cache.shapes[i],
                need_input_grad,
            );
        }
        Ok(grads)
    }

    pub fn to_container(&self) -> TensorContainer {
        TensorContainer::new(vec![
            Section::ints("spec", self.spec.encode()),
            Section::vector("params", self.params.clone()),
            Section::ints("seed", vec![self.seed as i64]),
        ])
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let spec = NetworkSpec::decode(c.i64s("spec")?)?;
        let seed = *c.i64s("seed")?.first().ok_or_else(|| Error::format(0, "empty seed"))? as u64;
        Network::from_params(spec, c.f64s("params")?.to_vec(), seed)
    }
}

fn layer_forward(layer: &Layer, p: &[f64], x: &[f64], b: usize, shape: InputShape) -> Vec<f64> {
    match *layer {
        Layer::Dense { inputs, outputs } | Layer::LinearHead { inputs, classes: outputs } => {
            let (w, bias) = p.split_at(inputs * outputs);
            let mut y = Vec::with_capacity(b * outputs);
            for r in 0..b {
                let mut out = bias.to_vec();
                for (i, &xi) in x[r * inputs..(r + 1) * inputs].iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    for (o, wv) in out.iter_mut().zip(&w[i * outputs..(i + 1) * outputs]) {
                        *o += xi * wv;
                    }
                }
                y.extend(out);
            }
            y
        }
        Layer::Relu => x.iter().map(|v| v.max(0.0)).collect(),
        Layer::Gap => {
            let InputShape::Image { h, w, ch } = shape else { unreachable!() };
            let hw = (h * w) as f64;
            let mut y = vec![0.0; b * ch];
            for r in 0..b {
                let img = &x[r * h * w * ch..(r + 1) * h * w * ch];
                let out = &mut y[r * ch..(r + 1) * ch];
                for px in img.chunks_exact(ch) {
                    out.iter_mut().zip(px).for_each(|(o, v)| *o += v);
                }
                out.iter_mut().for_each(|o| *o /= hw);
            }
            y
        }
        Layer::Conv3x3 { in_ch, out_ch } => {
            let InputShape::Image { h, w, .. } = shape else { unreachable!() };
            let (wt, bias) = p.split_at(9 * in_ch * out_ch);
            let mut y = vec![0.0; b * h * w * out_ch];
            for r in 0..b {
                let img = &x[r * h * w * in_ch..(r + 1) * h * w * in_ch];
                for oy in 0..h {
                    for ox in 0..w {
                        let at = ((r * h + oy) * w + ox) * out_ch;
                        let out = &mut y[at..at + out_ch];
                        out.copy_from_slice(bias);
                        for ky in 0..3 {
                            let Some(iy) = (oy + ky).checked_sub(1).filter(|&v| v < h) else { continue };
                            for kx in 0..3 {
                                let Some(ix) = (ox + kx).checked_sub(1).filter(|&v| v < w) else { continue };
                                let px = &img[(iy * w + ix) * in_ch..(iy * w + ix + 1) * in_ch];
                                let tap_w = &wt[(ky * 3 + kx) * in_ch * out_ch..(ky * 3 + kx + 1) * in_ch * out_ch];
                                for (ci, &a) in px.iter().enumerate() {
                                    if a == 0.0 {
                                        continue;
                                    }
                                    for (o, wv) in out.iter_mut().zip(&tap_w[ci * out_ch..(ci + 1) * out_ch]) {
                                        *o += a * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            y
        }
    }
}

/// Accumulates parameter gradients into `pg` and returns the gradient with
/// respect to the layer input (empty when `need_input_grad` is false).
#[allow(clippy::too_many_arguments)]
fn layer_backward(
    layer: &Layer,
    p: &[f64],
    pg: &mut [f64],
    x: &[f64],
    gy: &[f64],
    b: usize,
    shape: InputShape,
    need_input_grad: bool,
) -> Vec<f64> {
    match *layer {
        Layer::Dense { inputs, outputs } | Layer::LinearHead { inputs, classes: outputs } => {
            let (w, _) = p.split_at(inputs * outputs);
            let (gw, gb) = pg.split_at_mut(inputs * outputs);
            let mut gx = if need_input_grad { vec![0.0; b * inputs] } else { Vec::new() };
            for r in 0..b {
                let xr = &x[r * inputs..(r + 1) * inputs];
                let gr = &gy[r * outputs..(r + 1) * outputs];
                gb.iter_mut().zip(gr).for_each(|(a, v)| *a += v);
                for i in 0..inputs {
                    let wrow = &w[i * outputs..(i + 1) * outputs];
                    let gwrow = &mut gw[i * outputs..(i + 1) * outputs];
                    let xi = xr[i];
                    let mut acc = 0.0;
                    for o in 0..outputs {
                        gwrow[o] += xi * gr[o];
                        acc += wrow[o] * gr[o];
                    }
                    if need_input_grad {
                        gx[r * inputs + i] = acc;
                    }
                }
            }
            gx
        }
        Layer::Relu => {
            if !need_input_grad {
                return Vec::new();
            }
            // Subgradient 0 at the kink.
            x.iter()
                .zip(gy)
                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                .collect()
        }
        Layer::Gap => {
            let InputShape::Image { h, w, ch } = shape else { unreachable!() };
            if !need_input_grad {
                return Vec::new();
            }
            let hw = (h * w) as f64;
            let mut gx = vec![0.0; b * h * w * ch];
            for r in 0..b {
                let gr = &gy[r * ch..(r + 1) * ch];
                for px in gx[r * h * w * ch..(r + 1) * h * w * ch].chunks_exact_mut(ch) {
                    px.iter_mut().zip(gr).for_each(|(a, g)| *a = g / hw);
                }
            }
            gx
        }
        Layer::Conv3x3 { in_ch, out_ch } => {
            let InputShape::Image { h, w, .. } = shape else { unreachable!() };
            let (wt, _) = p.split_at(9 * in_ch * out_ch);
            let (gw, gb) = pg.split_at_mut(9 * in_ch * out_ch);
            let mut gx = if need_input_grad { vec![0.0; b * h * w * in_ch] } else { Vec::new() };
            for r in 0..b {
                let img = &x[r * h * w * in_ch..(r + 1) * h * w * in_ch];
                for oy in 0..h {
                    for ox in 0..w {
                        let at = ((r * h + oy) * w + ox) * out_ch;
                        let go = &gy[at..at + out_ch];
                        gb.iter_mut().zip(go).for_each(|(a, v)| *a += v);
                        for ky in 0..3 {
                            let Some(iy) = (oy + ky).checked_sub(1).filter(|&v| v < h) else { continue };
                            for kx in 0..3 {
                                let Some(ix) = (ox + kx).checked_sub(1).filter(|&v| v < w) else { continue };
                                let pix = (iy * w + ix) * in_ch;
                                let kbase = (ky * 3 + kx) * in_ch * out_ch;
                                for ci in 0..in_ch {
                                    let a = img[pix + ci];
                                    let wrow = &wt[kbase + ci * out_ch..kbase + (ci + 1) * out_ch];
                                    let gwrow = &mut gw[kbase + ci * out_ch..kbase + (ci + 1) * out_ch];
                                    let mut acc = 0.0;
                                    for o in 0..out_ch {
                                        gwrow[o] += a * go[o];
                                        acc += wrow[o] * go[o];
                                    }
                                    if need_input_grad {
                                        gx[r * h * w * in_ch + pix + ci] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            gx
        }
    }
}
