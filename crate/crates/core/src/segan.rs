//! Generator (strided encoder-decoder with latent noise and learnable skips)
//! and discriminator (spectrally normalized conv trunk with an adversarial
//! head and an acoustic-regression branch).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::N_ACOUSTIC;
use crate::rng::Rng;
use crate::tensor_nn::{Graph, ParamId, ParamStore, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const PRELU_INIT: f64 = 0.25;

fn scale_width(m: usize, s: f64) -> usize {
    ((m as f64 * s).round() as usize).max(1)
}

fn same_pad(kernel: usize) -> usize {
    kernel / 2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub kernel_width: usize,
    pub encoder_maps: Vec<usize>,
    pub decoder_maps: Vec<usize>,
    pub stride: usize,
    pub width_scale: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            kernel_width: 31,
            encoder_maps: vec![64, 128, 256, 512, 1024],
            decoder_maps: vec![512, 256, 128, 64, 1],
            stride: 4,
            width_scale: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn scaled(width_scale: f64) -> Self {
        Self {
            width_scale,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.encoder_maps.is_empty() || self.encoder_maps.len() != self.decoder_maps.len() {
            return bad("encoder and decoder must have the same non-zero depth".into());
        }
        if self.decoder_maps.last() != Some(&1) {
            return bad("the last decoder map must be 1".into());
        }
        if self.kernel_width % 2 == 0 || self.kernel_width < self.stride {
            return bad(format!("kernel width {} must be odd and at least the stride", self.kernel_width));
        }
        if self.stride < 2 {
            return bad(format!("stride {} must be at least 2", self.stride));
        }
        if !(self.width_scale > 0.0 && self.width_scale.is_finite()) {
            return bad(format!("width_scale must be positive, got {}", self.width_scale));
        }
        // Skip connections need matching widths on both sides.
        let (enc, dec) = self.maps();
        for i in 0..enc.len() - 1 {
            if dec[i] != enc[enc.len() - 2 - i] {
                return bad(format!(
                    "decoder layer {} has {} maps but its skip source has {}",
                    i + 1,
                    dec[i],
                    enc[enc.len() - 2 - i]
                ));
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.encoder_maps.len()
    }

    /// Maps after width scaling; the final output stays one channel.
    pub fn maps(&self) -> (Vec<usize>, Vec<usize>) {
        let enc = self.encoder_maps.iter().map(|&m| scale_width(m, self.width_scale)).collect();
        let mut dec: Vec<usize> = self.decoder_maps.iter().map(|&m| scale_width(m, self.width_scale)).collect();
        *dec.last_mut().unwrap() = 1;
        (enc, dec)
    }

    /// Inputs must be a multiple of this length.
    pub fn length_quantum(&self) -> usize {
        self.stride.pow(self.depth() as u32)
    }

    /// Shape `[channels, frames]` of the bottleneck (and of `z`) for one item.
    pub fn bottleneck(&self, len: usize) -> [usize; 2] {
        [*self.maps().0.last().unwrap(), len / self.length_quantum()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub kernel_width: usize,
    pub conv_maps: Vec<usize>,
    pub stride: usize,
    pub mlp_hidden: usize,
    pub acoustic_branch_layer: usize,
    pub acoustic_hidden: usize,
    pub acoustic_out: usize,
    pub phase_shuffle: usize,
    pub input_len: usize,
    pub width_scale: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            kernel_width: 31,
            conv_maps: vec![64, 128, 256, 512, 1024],
            stride: 4,
            mlp_hidden: 256,
            acoustic_branch_layer: 4,
            acoustic_hidden: 128,
            acoustic_out: N_ACOUSTIC,
            phase_shuffle: 5,
            input_len: crate::CHUNK_LEN,
            width_scale: 1.0,
        }
    }
}

impl DiscriminatorConfig {
    pub fn scaled(width_scale: f64) -> Self {
        Self {
            width_scale,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let depth = self.conv_maps.len();
        if depth == 0 {
            return bad("discriminator needs at least one conv layer".into());
        }
        if !(1..=depth).contains(&self.acoustic_branch_layer) {
            return bad(format!("acoustic branch layer {} outside 1..={depth}", self.acoustic_branch_layer));
        }
        if self.kernel_width % 2 == 0 || self.stride < 2 {
            return bad("kernel width must be odd and stride at least 2".into());
        }
        if !(self.width_scale > 0.0 && self.width_scale.is_finite()) {
            return bad(format!("width_scale must be positive, got {}", self.width_scale));
        }
        if self.acoustic_out == 0 || self.mlp_hidden == 0 || self.acoustic_hidden == 0 {
            return bad("head sizes must be positive".into());
        }
        let q = self.stride.pow(depth as u32);
        if self.input_len == 0 || self.input_len % q != 0 {
            return bad(format!("input length {} is not a multiple of {q}", self.input_len));
        }
        if self.frames_after(depth) <= 2 * self.phase_shuffle {
            return bad(format!(
                "last conv layer has {} frames, too short for phase shuffle {}",
                self.frames_after(depth),
                self.phase_shuffle
            ));
        }
        Ok(())
    }

    pub fn maps(&self) -> Vec<usize> {
        self.conv_maps.iter().map(|&m| scale_width(m, self.width_scale)).collect()
    }

    pub fn mlp_hidden_scaled(&self) -> usize {
        scale_width(self.mlp_hidden, self.width_scale)
    }

    pub fn acoustic_hidden_scaled(&self) -> usize {
        scale_width(self.acoustic_hidden, self.width_scale)
    }

    /// Frames after conv layer `layer` (1-based) for the configured input.
    pub fn frames_after(&self, layer: usize) -> usize {
        self.input_len / self.stride.pow(layer as u32)
    }

    /// Total decimation at the acoustic branch.
    pub fn branch_decimation(&self) -> usize {
        self.stride.pow(self.acoustic_branch_layer as u32)
    }

    /// Number of features entering the adversarial MLP.
    pub fn trunk_features(&self) -> usize {
        self.maps().last().unwrap() * self.frames_after(self.conv_maps.len())
    }
}

struct ConvLayer {
    w: ParamId,
    b: ParamId,
    alpha: Option<ParamId>,
}

pub struct Generator {
    pub cfg: GeneratorConfig,
    pub params: ParamStore,
    enc: Vec<ConvLayer>,
    dec: Vec<ConvLayer>,
    skips: Vec<ParamId>,
}

/// Bind every parameter of `store` as a graph leaf, indexed by `ParamId`.
pub fn bind(store: &ParamStore, g: &mut Graph, trainable: bool) -> Vec<Var> {
    store
        .iter()
        .map(|(_, p)| g.leaf(p.value.clone(), trainable))
        .collect()
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (enc_maps, dec_maps) = cfg.maps();
        let k = cfg.kernel_width;
        let mut params = ParamStore::new();
        let mut enc = Vec::new();
        let mut c_in = 1;
        for (i, &c) in enc_maps.iter().enumerate() {
            enc.push(ConvLayer {
                w: params.add(format!("g.enc{}.w", i + 1), Tensor::randn(&[c, c_in, k], INIT_STD, rng)),
                b: params.add(format!("g.enc{}.b", i + 1), Tensor::zeros(&[c])),
                alpha: Some(params.add(format!("g.enc{}.alpha", i + 1), Tensor::full(&[c], PRELU_INIT))),
            });
            c_in = c;
        }
        // The latent noise doubles the bottleneck channels.
        c_in *= 2;
        let mut dec = Vec::new();
        let depth = dec_maps.len();
        for (i, &c) in dec_maps.iter().enumerate() {
            let last = i + 1 == depth;
            dec.push(ConvLayer {
                w: params.add(format!("g.dec{}.w", i + 1), Tensor::randn(&[c_in, c, k], INIT_STD, rng)),
                b: params.add(format!("g.dec{}.b", i + 1), Tensor::zeros(&[c])),
                alpha: (!last).then(|| params.add(format!("g.dec{}.alpha", i + 1), Tensor::full(&[c], PRELU_INIT))),
            });
            c_in = c;
        }
        let skips = (0..depth - 1)
            .map(|i| params.add(format!("g.skip{}", i + 1), Tensor::full(&[dec_maps[i]], 1.0)))
            .collect();
        Ok(Self {
            cfg,
            params,
            enc,
            dec,
            skips,
        })
    }

    pub fn check_len(&self, len: usize) -> Result<()> {
        let q = self.cfg.length_quantum();
        if len == 0 || len % q != 0 {
            return Err(Error::Shape(format!("generator input length {len} is not a multiple of {q}")));
        }
        Ok(())
    }

    /// Standard-normal latent noise for a batch of `batch` inputs of `len`.
    pub fn sample_z(&self, batch: usize, len: usize, rng: &mut Rng) -> Tensor {
        let [c, t] = self.cfg.bottleneck(len);
        Tensor::randn(&[batch, c, t], 1.0, rng)
    }

    /// `x` is `[B, 1, L]`, `z` is `[B, C, L / 4^depth]`; returns `[B, 1, L]`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var, z: Var) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 3 || xs[1] != 1 {
            return Err(Error::Shape(format!("generator input must be [B, 1, L], got {xs:?}")));
        }
        self.check_len(xs[2])?;
        let [c, t] = self.cfg.bottleneck(xs[2]);
        if g.shape(z) != [xs[0], c, t] {
            return Err(Error::Shape(format!("latent {:?}, expected {:?}", g.shape(z), [xs[0], c, t])));
        }
        let (s, pad) = (self.cfg.stride, same_pad(self.cfg.kernel_width));
        let mut h = x;
        let mut skips = Vec::new();
        for layer in &self.enc {
            let y = g.conv1d(h, p[layer.w.0], Some(p[layer.b.0]), s, pad)?;
            h = g.prelu(y, p[layer.alpha.unwrap().0])?;
            skips.push(h);
        }
        skips.pop();
        h = g.concat_channels(&[h, z])?;
        for (i, layer) in self.dec.iter().enumerate() {
            let y = g.conv_transpose1d(h, p[layer.w.0], Some(p[layer.b.0]), s, pad)?;
            h = match layer.alpha {
                Some(a) => {
                    let act = g.prelu(y, p[a.0])?;
                    let e = skips.pop().expect("one skip per hidden decoder layer");
                    let scaled = g.scale_channels(e, p[self.skips[i].0])?;
                    g.add(act, scaled)?
                }
                None => g.tanh(y)?,
            };
        }
        Ok(h)
    }

    /// Enhance a batch without recording gradients for parameters.
    pub fn infer(&self, x: Tensor, z: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = bind(&self.params, &mut g, false);
        let xv = g.constant(x);
        let zv = g.constant(z);
        let y = self.forward(&mut g, &p, xv, zv)?;
        Ok(g.value(y).clone())
    }
}

pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    pub params: ParamStore,
    convs: Vec<ConvLayer>,
    branch: [ParamId; 5],
    head: [ParamId; 5],
}

/// Outputs of one discriminator pass.
#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorOutput {
    /// `[B, 1]` adversarial scores.
    pub score: Var,
    /// `[B, T, acoustic_out]` frame-wise acoustic predictions.
    pub acoustic: Var,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let maps = cfg.maps();
        let k = cfg.kernel_width;
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        let mut c_in = 2;
        for (i, &c) in maps.iter().enumerate() {
            let w = Tensor::randn(&[c, c_in, k], INIT_STD, rng);
            convs.push(ConvLayer {
                w: params.add_spectral(format!("d.conv{}.w", i + 1), w, rng),
                b: params.add(format!("d.conv{}.b", i + 1), Tensor::zeros(&[c])),
                alpha: Some(params.add(format!("d.conv{}.alpha", i + 1), Tensor::full(&[c], PRELU_INIT))),
            });
            c_in = c;
        }
        let c_branch = maps[cfg.acoustic_branch_layer - 1];
        let ah = cfg.acoustic_hidden_scaled();
        let ao = cfg.acoustic_out;
        let w1 = Tensor::randn(&[ah, c_branch], INIT_STD, rng);
        let w2 = Tensor::randn(&[ao, ah], INIT_STD, rng);
        let branch = [
            params.add_spectral("d.aco.fc1.w", w1, rng),
            params.add("d.aco.fc1.b", Tensor::zeros(&[ah])),
            params.add("d.aco.fc1.alpha", Tensor::full(&[ah], PRELU_INIT)),
            params.add_spectral("d.aco.fc2.w", w2, rng),
            params.add("d.aco.fc2.b", Tensor::zeros(&[ao])),
        ];
        let mh = cfg.mlp_hidden_scaled();
        let w1 = Tensor::randn(&[mh, cfg.trunk_features()], INIT_STD, rng);
        let w2 = Tensor::randn(&[1, mh], INIT_STD, rng);
        let head = [
            params.add_spectral("d.fc1.w", w1, rng),
            params.add("d.fc1.b", Tensor::zeros(&[mh])),
            params.add("d.fc1.alpha", Tensor::full(&[mh], PRELU_INIT)),
            params.add_spectral("d.fc2.w", w2, rng),
            params.add("d.fc2.b", Tensor::zeros(&[1])),
        ];
        Ok(Self {
            cfg,
            params,
            convs,
            branch,
            head,
        })
    }

    /// Ids of the acoustic-branch parameters.
    pub fn branch_params(&self) -> &[ParamId] {
        &self.branch
    }

    fn weight(&self, g: &mut Graph, p: &[Var], id: ParamId) -> Result<Var> {
        match &self.params.get(id).spectral {
            Some(state) => g.spectral_norm(p[id.0], state),
            None => Ok(p[id.0]),
        }
    }

    /// Score the pair `(signal, condition)`, both `[B, 1, L]`, stacked as two
    /// input channels. Phase shifts are drawn from `rng`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], signal: Var, condition: Var, rng: &mut Rng) -> Result<DiscriminatorOutput> {
        let ss = g.shape(signal).to_vec();
        if ss != g.shape(condition) || ss.len() != 3 || ss[1] != 1 {
            return Err(Error::Shape(format!(
                "discriminator inputs {ss:?} and {:?} must both be [B, 1, L]",
                g.shape(condition)
            )));
        }
        if ss[2] != self.cfg.input_len {
            return Err(Error::Shape(format!(
                "discriminator built for length {}, got {}",
                self.cfg.input_len, ss[2]
            )));
        }
        let bsz = ss[0];
        let (s, pad) = (self.cfg.stride, same_pad(self.cfg.kernel_width));
        let mut h = g.concat_channels(&[signal, condition])?;
        let mut tap = None;
        for (i, layer) in self.convs.iter().enumerate() {
            let w = self.weight(g, p, layer.w)?;
            let y = g.conv1d(h, w, Some(p[layer.b.0]), s, pad)?;
            let act = g.prelu(y, p[layer.alpha.unwrap().0])?;
            if i + 1 == self.cfg.acoustic_branch_layer {
                tap = Some(act);
            }
            h = g.random_phase_shuffle(act, self.cfg.phase_shuffle, rng)?;
        }

        let tap = tap.expect("branch layer validated");
        let ts = g.shape(tap).to_vec();
        let frames = g.channels_last(tap)?;
        let rows = g.reshape(frames, vec![bsz * ts[2], ts[1]])?;
        let [w1, b1, a1, w2, b2] = self.branch;
        let w = self.weight(g, p, w1)?;
        let a = g.linear(rows, w, Some(p[b1.0]))?;
        let a = g.prelu(a, p[a1.0])?;
        let w = self.weight(g, p, w2)?;
        let a = g.linear(a, w, Some(p[b2.0]))?;
        let acoustic = g.reshape(a, vec![bsz, ts[2], self.cfg.acoustic_out])?;

        let n = g.value(h).len() / bsz;
        let flat = g.reshape(h, vec![bsz, n])?;
        let [w1, b1, a1, w2, b2] = self.head;
        let w = self.weight(g, p, w1)?;
        let y = g.linear(flat, w, Some(p[b1.0]))?;
        let y = g.prelu(y, p[a1.0])?;
        let w = self.weight(g, p, w2)?;
        let score = g.linear(y, w, Some(p[b2.0]))?;
        Ok(DiscriminatorOutput { score, acoustic })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn small() -> (Generator, Discriminator) {
        let mut r = rng::from_seed(1);
        (
            Generator::new(GeneratorConfig::scaled(1.0 / 16.0), &mut r).unwrap(),
            Discriminator::new(DiscriminatorConfig::scaled(1.0 / 16.0), &mut r).unwrap(),
        )
    }

    #[test]
    fn generator_parameter_count_closed_form() {
        let g = Generator::new(GeneratorConfig::scaled(1.0 / 16.0), &mut rng::from_seed(0)).unwrap();
        let enc = [4usize, 8, 16, 32, 64];
        let dec = [32usize, 16, 8, 4, 1];
        let mut n = 0;
        let mut c = 1;
        for &m in &enc {
            n += c * m * 31 + 2 * m;
            c = m;
        }
        c *= 2;
        for (i, &m) in dec.iter().enumerate() {
            n += c * m * 31 + m + if i < 4 { m } else { 0 };
            c = m;
        }
        n += 32 + 16 + 8 + 4;
        assert_eq!(g.params.count(), n);
    }

    #[test]
    fn discriminator_parameter_count_closed_form() {
        let d = Discriminator::new(DiscriminatorConfig::scaled(1.0 / 16.0), &mut rng::from_seed(0)).unwrap();
        let maps = [4usize, 8, 16, 32, 64];
        let mut n = 0;
        let mut c = 2;
        for &m in &maps {
            n += c * m * 31 + 2 * m;
            c = m;
        }
        n += 32 * 8 + 2 * 8 + 8 * 277 + 277;
        n += 64 * 16 * 16 + 2 * 16 + 16 + 1;
        assert_eq!(d.params.count(), n);
    }

    #[test]
    fn shapes_at_small_width() {
        let (gen, disc) = small();
        let mut r = rng::from_seed(2);
        let mut g = Graph::new();
        let gp = bind(&gen.params, &mut g, false);
        let dp = bind(&disc.params, &mut g, false);
        let x = g.constant(Tensor::randn(&[2, 1, 16384], 0.1, &mut r));
        let z = g.constant(gen.sample_z(2, 16384, &mut r));
        let y = gen.forward(&mut g, &gp, x, z).unwrap();
        assert_eq!(g.shape(y), &[2, 1, 16384]);
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1.0));
        let out = disc.forward(&mut g, &dp, y, x, &mut r).unwrap();
        assert_eq!(g.shape(out.score), &[2, 1]);
        assert_eq!(g.shape(out.acoustic), &[2, 64, 277]);
        assert_eq!(disc.cfg.branch_decimation(), 256);
    }

    #[test]
    fn rejects_bad_lengths() {
        let (gen, _) = small();
        let mut g = Graph::new();
        let gp = bind(&gen.params, &mut g, false);
        let x = g.constant(Tensor::zeros(&[1, 1, 1000]));
        let z = g.constant(Tensor::zeros(&[1, 64, 1]));
        assert!(matches!(gen.forward(&mut g, &gp, x, z), Err(Error::Shape(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Generator::new(GeneratorConfig::scaled(0.125), &mut rng::from_seed(5)).unwrap();
        let b = Generator::new(GeneratorConfig::scaled(0.125), &mut rng::from_seed(5)).unwrap();
        for ((_, p), (_, q)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = GeneratorConfig::default();
        c.decoder_maps[4] = 2;
        assert!(c.validate().is_err());
        let d = DiscriminatorConfig {
            acoustic_branch_layer: 6,
            ..DiscriminatorConfig::default()
        };
        assert!(d.validate().is_err());
        let d = DiscriminatorConfig {
            input_len: 1024,
            ..DiscriminatorConfig::default()
        };
        assert!(d.validate().is_err());
    }
}
