use featlens_tensor::{Graph, ParamSet, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct HostConfig {
    pub input_hw: (usize, usize),
    pub input_channels: usize,
    pub class_count: usize,
    pub stem_width: usize,
    /// Output widths of the stride-2 stages before the last block.
    pub stage_widths: Vec<usize>,
    /// Mid-width of the bottleneck block; its input and output have `4 *
    /// bottleneck_width` channels.
    pub bottleneck_width: usize,
    pub seed: u64,
}

impl Default for HostConfig {
    fn default() -> Self {
        HostConfig {
            input_hw: (56, 56),
            input_channels: 1,
            class_count: 10,
            stem_width: 8,
            stage_widths: vec![16, 32],
            bottleneck_width: 64,
            seed: 0,
        }
    }
}

fn down(n: usize) -> usize {
    // 3x3, stride 2, padding 1
    (n + 1) / 2
}

impl HostConfig {
    pub fn block_width(&self) -> usize {
        4 * self.bottleneck_width
    }

    /// Spatial size of the last block's feature maps.
    pub fn feature_hw(&self) -> (usize, usize) {
        let stages = self.stage_widths.len() + 1;
        let (mut h, mut w) = self.input_hw;
        for _ in 0..stages {
            h = down(h);
            w = down(w);
        }
        (h, w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.class_count < 2 || self.stem_width == 0 || self.bottleneck_width == 0 {
            return Err(Error::config("host widths and class count must be positive"));
        }
        if self.stage_widths.contains(&0) {
            return Err(Error::config("stage widths must be positive"));
        }
        let (h, w) = self.feature_hw();
        if h < 2 || w < 2 {
            return Err(Error::config(format!(
                "input {:?} shrinks to {h}x{w} before the last block",
                self.input_hw
            )));
        }
        Ok(())
    }

    /// Integer encoding stored alongside checkpoints.
    pub fn encode(&self) -> Vec<f32> {
        let mut v = vec![
            self.input_hw.0 as f32,
            self.input_hw.1 as f32,
            self.input_channels as f32,
            self.class_count as f32,
            self.stem_width as f32,
            self.bottleneck_width as f32,
            self.stage_widths.len() as f32,
        ];
        v.extend(self.stage_widths.iter().map(|&s| s as f32));
        v
    }

    pub fn decode(v: &[f32]) -> Result<Self> {
        let bad = || Error::config("malformed host config entry");
        if v.len() < 7 || v.iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
            return Err(bad());
        }
        let n = v[6] as usize;
        if v.len() != 7 + n {
            return Err(bad());
        }
        let cfg = HostConfig {
            input_hw: (v[0] as usize, v[1] as usize),
            input_channels: v[2] as usize,
            class_count: v[3] as usize,
            stem_width: v[4] as usize,
            bottleneck_width: v[5] as usize,
            stage_widths: v[7..].iter().map(|&s| s as usize).collect(),
            seed: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Graph handles for the last block's intermediate features.
#[derive(Clone, Copy, Debug)]
pub struct TapVars {
    /// Shortcut input to the last block.
    pub x0: Var,
    /// Output of the middle 3x3 convolution (after ReLU).
    pub x2: Var,
    /// Output of the closing 1x1 convolution (before the shortcut add).
    pub x3: Var,
    /// Block output `relu(x3 + x0)`, the tensor the classifier pools.
    pub out: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Taps {
    pub x0: Tensor,
    pub x2: Tensor,
    pub x3: Tensor,
    pub out: Tensor,
}

impl Taps {
    pub fn read(g: &Graph, v: &TapVars) -> Taps {
        Taps {
            x0: g.value(v.x0).clone(),
            x2: g.value(v.x2).clone(),
            x3: g.value(v.x3).clone(),
            out: g.value(v.out).clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.x0.all_finite() && self.x2.all_finite() && self.x3.all_finite() && self.out.all_finite()
    }

    /// Every tap restricted to the spatial window `[top, top+h) x [left, left+w)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Taps> {
        Ok(Taps {
            x0: self.x0.crop(top, left, h, w)?,
            x2: self.x2.crop(top, left, h, w)?,
            x3: self.x3.crop(top, left, h, w)?,
            out: self.out.crop(top, left, h, w)?,
        })
    }

    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Taps> {
        Ok(Taps {
            x0: self.x0.narrow_batch(start, len)?,
            x2: self.x2.narrow_batch(start, len)?,
            x3: self.x3.narrow_batch(start, len)?,
            out: self.out.narrow_batch(start, len)?,
        })
    }
}

/// Small residual classifier: stem, stride-2 stages, a stride-2 transition
/// to the block width, one bottleneck block, global pooling and a linear
/// head.
#[derive(Clone, Debug)]
pub struct Host {
    config: HostConfig,
    params: ParamSet,
}

fn he_normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, gain: f64) -> Tensor {
    let dist = Normal::new(0.0, gain * (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng) as f32)
}

impl Host {
    pub fn build(config: HostConfig) -> Result<Host> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let mut conv = |params: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize| -> Result<()> {
            params.insert(
                format!("{name}.weight"),
                he_normal(&mut rng, vec![cout, cin, k, k], cin * k * k, 1.0),
            )?;
            params.insert(format!("{name}.bias"), Tensor::zeros(vec![cout]))?;
            Ok(())
        };
        let n = config.bottleneck_width;
        let wide = config.block_width();
        conv(&mut params, "stem", config.input_channels, config.stem_width, 3)?;
        let mut cin = config.stem_width;
        for (i, &c) in config.stage_widths.iter().enumerate() {
            conv(&mut params, &format!("stage{i}"), cin, c, 3)?;
            cin = c;
        }
        conv(&mut params, "transition", cin, wide, 3)?;
        conv(&mut params, "block.conv1", wide, n, 1)?;
        conv(&mut params, "block.conv2", n, n, 3)?;
        conv(&mut params, "block.conv3", n, wide, 1)?;
        let fc = Normal::new(0.0, (1.0 / wide as f64).sqrt()).expect("positive std");
        params.insert("fc.weight", Tensor::from_fn(vec![config.class_count, wide], |_| fc.sample(&mut rng) as f32))?;
        params.insert("fc.bias", Tensor::zeros(vec![config.class_count]))?;
        Ok(Host { config, params })
    }

    /// Rebuilds a host from stored parameters, checking every shape against
    /// a freshly built reference.
    pub fn from_params(config: HostConfig, params: ParamSet) -> Result<Host> {
        let reference = Host::build(config.clone())?;
        if reference.params.len() != params.len() {
            return Err(Error::config(format!(
                "expected {} host parameters, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for p in reference.params.iter() {
            let got = params.get(&p.name)?;
            if got.shape() != p.value.shape() {
                return Err(Error::config(format!(
                    "host parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    got.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(Host { config, params })
    }

    pub fn config(&self) -> &HostConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn conv(&self, g: &mut Graph, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.params.bind(g, &format!("{name}.weight"))?;
        let b = self.params.bind(g, &format!("{name}.bias"))?;
        Ok(g.conv2d(x, w, Some(b), stride, pad)?)
    }

    /// Runs everything up to the last block's output.
    pub fn features(&self, g: &mut Graph, input: Var) -> Result<TapVars> {
        let shape = g.shape(input).to_vec();
        let expect = [self.config.input_channels, self.config.input_hw.0, self.config.input_hw.1];
        if shape.len() != 4 || shape[1] != expect[0] {
            return Err(featlens_tensor::TensorError::ShapeMismatch {
                op: "host",
                expected: format!("[B, {}, H, W]", expect[0]),
                got: format!("{shape:?}"),
            }
            .into());
        }
        let mut x = self.conv(g, "stem", input, 1, 1)?;
        x = g.relu(x)?;
        for i in 0..self.config.stage_widths.len() {
            x = self.conv(g, &format!("stage{i}"), x, 2, 1)?;
            x = g.relu(x)?;
        }
        let t = self.conv(g, "transition", x, 2, 1)?;
        let x0 = g.relu(t)?;
        let c1 = self.conv(g, "block.conv1", x0, 1, 0)?;
        let x1 = g.relu(c1)?;
        let c2 = self.conv(g, "block.conv2", x1, 1, 1)?;
        let x2 = g.relu(c2)?;
        let x3 = self.conv(g, "block.conv3", x2, 1, 0)?;
        let sum = g.add(x3, x0)?;
        let out = g.relu(sum)?;
        Ok(TapVars { x0, x2, x3, out })
    }

    /// Pooling and the linear classifier applied to block-width features.
    pub fn head(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(features)?;
        let w = self.params.bind(g, "fc.weight")?;
        let b = self.params.bind(g, "fc.bias")?;
        Ok(g.fully_connected(pooled, w, Some(b))?)
    }

    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<(Var, TapVars)> {
        let taps = self.features(g, input)?;
        let logits = self.head(g, taps.out)?;
        Ok((logits, taps))
    }

    pub fn forward_with_taps(&self, batch: &Tensor) -> Result<(Tensor, Taps)> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let (logits, taps) = self.forward(&mut g, x)?;
        Ok((g.value(logits).clone(), Taps::read(&g, &taps)))
    }

    /// Named tensors for persistence; the configuration travels as
    /// `host.config`.
    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        let cfg = self.config.encode();
        let mut out = vec![("host.config".to_string(), Tensor::new(vec![cfg.len()], cfg).expect("1-d"))];
        out.extend(self.params.iter().map(|p| (format!("host.{}", p.name), p.value.clone())));
        out
    }

    pub fn from_entries(entries: &[(String, Tensor)]) -> Result<Host> {
        let cfg = entries
            .iter()
            .find(|(n, _)| n == "host.config")
            .ok_or_else(|| Error::MissingEntry("host.config".into()))?;
        let config = HostConfig::decode(cfg.1.data())?;
        let mut params = ParamSet::new();
        for (name, t) in entries {
            if let Some(rest) = name.strip_prefix("host.") {
                if rest != "config" {
                    params.insert(rest, t.clone())?;
                }
            }
        }
        Host::from_params(config, params)
    }

    /// Irreversibly marks every parameter non-trainable.
    pub fn freeze(mut self) -> FrozenHost {
        self.params.freeze();
        FrozenHost { host: self }
    }
}

/// A host whose parameters can no longer change. Binding it into a graph
/// yields constants only.
#[derive(Clone, Debug)]
pub struct FrozenHost {
    host: Host,
}

impl FrozenHost {
    pub fn config(&self) -> &HostConfig {
        &self.host.config
    }

    pub fn host(&self) -> &Host {
        &self.host
    }

    pub fn checksum(&self) -> u64 {
        self.host.params.checksum()
    }

    pub fn forward_with_taps(&self, batch: &Tensor) -> Result<(Tensor, Taps)> {
        self.host.forward_with_taps(batch)
    }

    pub fn features(&self, g: &mut Graph, input: Var) -> Result<TapVars> {
        self.host.features(g, input)
    }

    pub fn head(&self, g: &mut Graph, features: Var) -> Result<Var> {
        self.host.head(g, features)
    }

    /// Classifier logits for block-width feature maps.
    pub fn logits_from_features(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let l = self.head(&mut g, x)?;
        Ok(g.value(l).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_feature_size_is_seven() {
        assert_eq!(HostConfig::default().feature_hw(), (7, 7));
    }

    #[test]
    fn tiny_input_is_rejected() {
        let cfg = HostConfig {
            input_hw: (6, 6),
            ..HostConfig::default()
        };
        assert!(Host::build(cfg).is_err());
    }

    #[test]
    fn config_encoding_round_trips() {
        let cfg = HostConfig::default();
        let back = HostConfig::decode(&cfg.encode()).unwrap();
        assert_eq!(back, cfg);
    }
}
