//! The inpainting generator (frame encoder, transformer stack, frame decoder)
//! and the spatial-temporal PatchGAN discriminator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    bilinear_upsample, conv3d, spectral_normalize_op, Conv2dLayer, Init, ParamBinding, ParamId,
    ParamStore, SpectralNormState, LEAKY_SLOPE,
};
use crate::patch::{downsample_mask, PatchShape};
use crate::tensor::{Scalar, Tensor};
use crate::transformer::{stack_forward, AttentionTrace, TransformerLayer};

/// Spatial downsampling between frames and transformer features.
pub const FEATURE_STRIDE: usize = 4;

/// Architecture hyper-parameters shared by training, inference and the
/// checkpoint digest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frame_height: usize,
    pub frame_width: usize,
    /// Output channels of the four encoder convolutions; the last one is
    /// the transformer width.
    pub encoder_channels: [usize; 4],
    /// Output channels of the decoder convolutions before the final RGB one.
    pub decoder_channels: [usize; 3],
    pub layers: usize,
    pub heads: Vec<PatchShape>,
    pub visibility_threshold: f64,
    pub disc_channels: Vec<usize>,
}

impl ModelConfig {
    /// The published architecture at 432 x 240.
    pub fn full() -> Self {
        Self {
            frame_height: 240,
            frame_width: 432,
            encoder_channels: [64, 64, 128, 256],
            decoder_channels: [128, 64, 64],
            layers: 8,
            heads: vec![
                PatchShape::new(60, 108),
                PatchShape::new(20, 36),
                PatchShape::new(10, 18),
                PatchShape::new(5, 9),
            ],
            visibility_threshold: 0.0,
            disc_channels: vec![64, 128, 256, 256, 256, 256],
        }
    }

    /// CPU-trainable variant at 64 x 36 (feature map 16 x 9).
    pub fn desk() -> Self {
        Self {
            frame_height: 36,
            frame_width: 64,
            encoder_channels: [32, 32, 64, 64],
            decoder_channels: [64, 32, 32],
            layers: 2,
            heads: vec![
                PatchShape::new(9, 16),
                PatchShape::new(3, 8),
                PatchShape::new(3, 4),
                PatchShape::new(1, 2),
            ],
            visibility_threshold: 0.0,
            disc_channels: vec![16, 32, 64, 64, 64, 64],
        }
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (
            self.frame_height / FEATURE_STRIDE,
            self.frame_width / FEATURE_STRIDE,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !self.frame_height.is_multiple_of(FEATURE_STRIDE)
            || !self.frame_width.is_multiple_of(FEATURE_STRIDE)
        {
            return Err(Error::Config(format!(
                "frame size {}x{} must be divisible by {FEATURE_STRIDE}",
                self.frame_width, self.frame_height
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.heads.is_empty() || !self.encoder_channels[3].is_multiple_of(self.heads.len()) {
            return Err(Error::Config(format!(
                "{} feature channels cannot be split across {} heads",
                self.encoder_channels[3],
                self.heads.len()
            )));
        }
        let (h, w) = self.feature_size();
        for p in &self.heads {
            if p.rows == 0 || p.cols == 0 || h % p.rows != 0 || w % p.cols != 0 {
                return Err(Error::Config(format!(
                    "head patch {p} does not tile the {h}x{w} feature map"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.visibility_threshold) {
            return Err(Error::Config(
                "visibility_threshold must be in [0, 1]".into(),
            ));
        }
        if self.disc_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Generator parameter count from layer shapes alone.
    pub fn generator_param_count(&self) -> usize {
        let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
        let [e1, e2, e3, c] = self.encoder_channels;
        let [d1, d2, d3] = self.decoder_channels;
        let encoder = conv(4, e1, 3) + conv(e1, e2, 3) + conv(e2, e3, 3) + conv(e3, c, 3);
        let layer = 4 * conv(c, c, 1) + 2 * conv(c, c, 3);
        let decoder = conv(c, d1, 3) + conv(d1, d2, 3) + conv(d2, d3, 3) + conv(d3, 3, 3);
        encoder + self.layers * layer + decoder
    }
}

/// `T x 3 x H x W` frames plus `T x 1 x H x W` masks in, completed frames out.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: ModelConfig,
    pub encoder: Vec<Conv2dLayer>,
    pub transformer: Vec<TransformerLayer>,
    pub decoder: Vec<Conv2dLayer>,
}

impl Generator {
    pub fn new<T: Scalar>(
        config: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let [e1, e2, e3, c] = config.encoder_channels;
        let [d1, d2, d3] = config.decoder_channels;
        let encoder = vec![
            Conv2dLayer::new(store, "gen.enc0", 4, e1, 3, 2, rng),
            Conv2dLayer::new(store, "gen.enc1", e1, e2, 3, 1, rng),
            Conv2dLayer::new(store, "gen.enc2", e2, e3, 3, 2, rng),
            Conv2dLayer::new(store, "gen.enc3", e3, c, 3, 1, rng),
        ];
        let transformer = (0..config.layers)
            .map(|i| {
                TransformerLayer::new(
                    store,
                    &format!("gen.tf{i}"),
                    c,
                    &config.heads,
                    config.visibility_threshold,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = vec![
            Conv2dLayer::new(store, "gen.dec0", c, d1, 3, 1, rng),
            Conv2dLayer::new(store, "gen.dec1", d1, d2, 3, 1, rng),
            Conv2dLayer::new(store, "gen.dec2", d2, d3, 3, 1, rng),
            Conv2dLayer::linear(store, "gen.dec3", d3, 3, 3, rng),
        ];
        Ok(Self {
            config: config.clone(),
            encoder,
            transformer,
            decoder,
        })
    }

    pub fn final_conv(&self) -> &Conv2dLayer {
        self.decoder.last().expect("decoder is non-empty")
    }

    /// Encodes frames concatenated with their mask channel.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &mut ParamBinding<'_, T>,
        frames: Var,
        masks: Var,
    ) -> Result<Var> {
        let mut x = tape.concat(&[frames, masks], 1)?;
        for conv in &self.encoder {
            x = conv.forward(tape, params, x)?;
            x = tape.leaky_relu(x, LEAKY_SLOPE);
        }
        Ok(x)
    }

    pub fn decode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &mut ParamBinding<'_, T>,
        features: Var,
    ) -> Result<Var> {
        let mut x = bilinear_upsample(tape, features, 2)?;
        for (i, conv) in self.decoder.iter().enumerate() {
            if i == 2 {
                x = bilinear_upsample(tape, x, 2)?;
            }
            x = conv.forward(tape, params, x)?;
            x = if i + 1 == self.decoder.len() {
                tape.tanh(x)
            } else {
                tape.leaky_relu(x, LEAKY_SLOPE)
            };
        }
        Ok(x)
    }

    /// `frames` must already have holes zeroed; values in `[-1, 1]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &mut ParamBinding<'_, T>,
        frames: Var,
        masks: &Tensor<T>,
        traces: Option<&mut Vec<AttentionTrace>>,
    ) -> Result<Var> {
        let shape = tape.shape(frames).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape(format!(
                "expected T x 3 x H x W frames, got {shape:?}"
            )));
        }
        if !shape[2].is_multiple_of(FEATURE_STRIDE) || !shape[3].is_multiple_of(FEATURE_STRIDE) {
            return Err(Error::shape(format!(
                "frame size {}x{} not divisible by {FEATURE_STRIDE}",
                shape[3], shape[2]
            )));
        }
        if masks.shape() != [shape[0], 1, shape[2], shape[3]] {
            return Err(Error::shape(format!(
                "masks {:?} do not match frames {shape:?}",
                masks.shape()
            )));
        }
        let mask_var = tape.constant(masks.clone());
        let features = self.encode(tape, params, frames, mask_var)?;
        let feature_mask = downsample_mask(masks, FEATURE_STRIDE)?;
        let features = stack_forward(
            tape,
            params,
            &self.transformer,
            features,
            &feature_mask,
            traces,
        )?;
        self.decode(tape, params, features)
    }
}

/// `Y_comp = Y_hat * M + X * (1 - M)`.
pub fn composite<T: Scalar>(
    tape: &mut Tape<T>,
    generated: Var,
    input: Var,
    masks: &Tensor<T>,
) -> Result<Var> {
    let m = tape.constant(masks.clone());
    let keep = tape.constant(masks.map(|v| T::one() - v));
    let hole = tape.mul(generated, m)?;
    let known = tape.mul(input, keep)?;
    tape.add(hole, known)
}

/// Plain-tensor compositing (`T x 3 x H x W` with `T x 1 x H x W` masks).
pub fn composite_tensor<T: Scalar>(
    generated: &Tensor<T>,
    input: &Tensor<T>,
    masks: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let g = tape.constant(generated.clone());
    let x = tape.constant(input.clone());
    let c = composite(&mut tape, g, x, masks)?;
    Ok(tape.value(c).clone())
}

#[derive(Clone, Debug)]
pub struct DiscLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub spectral: SpectralNormState,
}

/// Six spectral-normalized 3D convolutions, kernel 3x5x5, stride (1,2,2),
/// padding (1,2,2); LeakyReLU between layers, none after the last.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub layers: Vec<DiscLayer>,
}

pub const DISC_KERNEL: [usize; 3] = [3, 5, 5];
pub const DISC_STRIDE: [usize; 3] = [1, 2, 2];
pub const DISC_PADDING: [usize; 3] = [1, 2, 2];

impl Discriminator {
    pub fn new<T: Scalar>(
        channels: &[usize],
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Self {
        let mut in_ch = 3;
        let k: usize = DISC_KERNEL.iter().product();
        let layers = channels
            .iter()
            .enumerate()
            .map(|(i, &out_ch)| {
                let weight = store.add_uniform(
                    format!("disc.conv{i}.weight"),
                    &[
                        out_ch,
                        in_ch,
                        DISC_KERNEL[0],
                        DISC_KERNEL[1],
                        DISC_KERNEL[2],
                    ],
                    Init::Rectified.bound(in_ch * k),
                    rng,
                );
                let bias = store.add_zeros(format!("disc.conv{i}.bias"), &[out_ch]);
                let layer = DiscLayer {
                    weight,
                    bias,
                    in_ch,
                    out_ch,
                    spectral: SpectralNormState::new(out_ch, in_ch * k, rng),
                };
                in_ch = out_ch;
                layer
            })
            .collect();
        Self { layers }
    }

    /// `video`: `B x 3 x T x H x W`. With `update_spectral`, each layer runs
    /// one power-iteration step before normalizing.
    pub fn forward<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        params: &mut ParamBinding<'_, T>,
        video: Var,
        update_spectral: bool,
    ) -> Result<Var> {
        let shape = tape.shape(video).to_vec();
        if shape.len() != 5 || shape[1] != 3 {
            return Err(Error::shape(format!(
                "expected B x 3 x T x H x W video, got {shape:?}"
            )));
        }
        if shape[2] < DISC_KERNEL[0] {
            return Err(Error::shape(format!(
                "discriminator needs at least {} frames, got {}",
                DISC_KERNEL[0], shape[2]
            )));
        }
        let mut x = video;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let w = params.var(tape, layer.weight);
            let w = spectral_normalize_op(tape, w, &mut layer.spectral, update_spectral)?;
            let b = params.var(tape, layer.bias);
            x = conv3d(tape, x, w, Some(b), DISC_STRIDE, DISC_PADDING)?;
            if i != last {
                x = tape.leaky_relu(x, LEAKY_SLOPE);
            }
        }
        Ok(x)
    }
}

/// `T x 3 x H x W` frames to a `1 x 3 x T x H x W` discriminator input.
pub fn frames_to_video<T: Scalar>(tape: &mut Tape<T>, frames: Var) -> Result<Var> {
    let s = tape.shape(frames).to_vec();
    if s.len() != 4 {
        return Err(Error::shape(format!("expected T x C x H x W, got {s:?}")));
    }
    let p = tape.permute(frames, &[1, 0, 2, 3])?;
    tape.reshape(p, &[1, s[1], s[0], s[2], s[3]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> ModelConfig {
        ModelConfig {
            frame_height: 16,
            frame_width: 16,
            encoder_channels: [4, 4, 8, 8],
            decoder_channels: [8, 4, 4],
            layers: 2,
            heads: vec![PatchShape::new(4, 4), PatchShape::new(2, 2)],
            visibility_threshold: 0.0,
            disc_channels: vec![4, 4, 4, 4, 4, 4],
        }
    }

    #[test]
    fn full_config_parameter_count() {
        let cfg = ModelConfig::full();
        let n = cfg.generator_param_count();
        let target = 12.6e6;
        assert!(((n as f64) - target).abs() / target < 0.05, "{n}");
    }

    #[test]
    fn analytic_count_matches_constructed_store() {
        let cfg = ModelConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        Generator::new(&cfg, &mut store, &mut rng).unwrap();
        assert_eq!(store.num_scalars(), cfg.generator_param_count());
    }

    #[test]
    fn generator_shape_and_bounds() {
        let cfg = ModelConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let g = Generator::new(&cfg, &mut store, &mut rng).unwrap();
        let frames = Tensor::<f32>::uniform([5, 3, 36, 64], -1.0, 1.0, &mut rng);
        let mut masks = Tensor::<f32>::zeros([5, 1, 36, 64]);
        for t in 0..5 {
            for y in 10..20 {
                for x in 20..30 {
                    masks.set(&[t, 0, y, x], 1.0);
                }
            }
        }
        let mut tape = Tape::new();
        let mut p = ParamBinding::new(&store, false);
        let f = tape.constant(frames);
        let out = g.forward(&mut tape, &mut p, f, &masks, None).unwrap();
        assert_eq!(tape.shape(out), &[5, 3, 36, 64]);
        assert!(tape
            .value(out)
            .data()
            .iter()
            .all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn encoder_channel_trace_at_full_widths() {
        let cfg = ModelConfig::full();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f32>::new();
        let g = Generator::new(&cfg, &mut store, &mut rng).unwrap();
        let outs: Vec<usize> = g.encoder.iter().map(|c| c.out_ch).collect();
        assert_eq!(outs, vec![64, 64, 128, 256]);
        let strides: Vec<usize> = g.encoder.iter().map(|c| c.stride).collect();
        assert_eq!(strides, vec![2, 1, 2, 1]);
        assert_eq!(cfg.feature_size(), (60, 108));
    }

    #[test]
    fn zero_final_conv_outputs_zero() {
        let cfg = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let g = Generator::new(&cfg, &mut store, &mut rng).unwrap();
        let last = g.final_conv().clone();
        *store.get_mut(last.weight) = Tensor::zeros(store.get(last.weight).shape().to_vec());
        let frames = Tensor::<f64>::uniform([2, 3, 16, 16], -1.0, 1.0, &mut rng);
        let masks = Tensor::<f64>::zeros([2, 1, 16, 16]);
        let mut tape = Tape::new();
        let mut p = ParamBinding::new(&store, false);
        let f = tape.constant(frames);
        let out = g.forward(&mut tape, &mut p, f, &masks, None).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_frames_rejected() {
        let mut cfg = toy();
        cfg.frame_width = 18;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let cfg = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let g = Generator::new(&cfg, &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut p = ParamBinding::new(&store, false);
        let f = tape.constant(Tensor::zeros([2, 3, 16, 18]));
        let m = Tensor::zeros([2, 1, 16, 18]);
        assert!(g.forward(&mut tape, &mut p, f, &m, None).is_err());
    }

    #[test]
    fn discriminator_score_map_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f32>::new();
        let mut d = Discriminator::new(&[2, 2, 2, 2, 2, 2], &mut store, &mut rng);
        let mut tape = Tape::new();
        let mut p = ParamBinding::new(&store, false);
        let v = tape.constant(Tensor::uniform([1, 3, 5, 64, 64], -1.0, 1.0, &mut rng));
        let s = d.forward(&mut tape, &mut p, v, true).unwrap();
        assert_eq!(tape.shape(s), &[1, 2, 5, 1, 1]);

        let v = tape.constant(Tensor::zeros([1, 3, 2, 64, 64]));
        assert!(d.forward(&mut tape, &mut p, v, true).is_err());
    }

    #[test]
    fn discriminator_zero_weights_zero_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let mut d = Discriminator::new(&[2, 3, 2, 2, 2, 1], &mut store, &mut rng);
        for v in store.values_mut() {
            *v = Tensor::zeros(v.shape().to_vec());
        }
        let mut tape = Tape::new();
        let mut p = ParamBinding::new(&store, false);
        let v = tape.constant(Tensor::uniform([1, 3, 3, 16, 16], -1.0, 1.0, &mut rng));
        let s = d.forward(&mut tape, &mut p, v, true).unwrap();
        assert!(tape.value(s).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn compositing_keeps_known_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gen = Tensor::<f64>::uniform([2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let inp = Tensor::<f64>::uniform([2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let mut m = Tensor::<f64>::zeros([2, 1, 4, 4]);
        m.set(&[1, 0, 2, 3], 1.0);
        let c = composite_tensor(&gen, &inp, &m).unwrap();
        for t in 0..2 {
            for ch in 0..3 {
                for y in 0..4 {
                    for x in 0..4 {
                        let hole = t == 1 && y == 2 && x == 3;
                        let want = if hole {
                            gen.at(&[t, ch, y, x])
                        } else {
                            inp.at(&[t, ch, y, x])
                        };
                        assert_eq!(c.at(&[t, ch, y, x]), want);
                    }
                }
            }
        }
        let empty = Tensor::<f64>::zeros([2, 1, 4, 4]);
        assert_eq!(composite_tensor(&gen, &inp, &empty).unwrap(), inp);
    }
}
