//! Training: clip sampling, Adam, alternating discriminator and generator
//! updates, CSV logging and checkpoints.

use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::{generate_clip, list_videos, read_frames, select_frames, SceneSpec};
use crate::error::{Error, Result};
use crate::io;
use crate::losses::{
    d_loss, g_adv_loss, l1_hole, l1_valid, read_loss_log, total_loss, LossLog, LossRecord,
};
use crate::maskgen::{derive_seed, generate_stationary_mask, stationary_sequence};
use crate::models::{composite, frames_to_video, Discriminator, Generator, ModelConfig};
use crate::nn::{ParamBinding, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "losses.csv";
pub const NAN_DUMP_FILE: &str = "nan_dump.txt";

/// `lr * decay^floor(step / decay_step)`.
pub fn learning_rate(cfg: &Config, step: u64) -> f64 {
    cfg.lr * cfg.lr_decay.powi((step / cfg.lr_decay_step) as i32)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, cfg: &Config) -> Self {
        let zeros = || {
            store
                .values()
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect()
        };
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Tensor<f32>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (i, p) in store.values_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mh = m[j] as f64 / c1;
                let vh = v[j] as f64 / c2;
                *w -= (lr * mh / (vh.sqrt() + self.eps)) as f32;
            }
        }
    }

    fn save(&self, ck: &mut Checkpoint, prefix: &str, store: &ParamStore<f32>) {
        ck.put_u64(&format!("{prefix}/t"), self.t);
        for (i, (name, _)) in store.iter().enumerate() {
            ck.put_tensor(&format!("{prefix}/m/{name}"), &self.m[i]);
            ck.put_tensor(&format!("{prefix}/v/{name}"), &self.v[i]);
        }
    }

    fn load(&mut self, ck: &Checkpoint, prefix: &str, store: &ParamStore<f32>) -> Result<()> {
        self.t = ck.get_u64(&format!("{prefix}/t"))?;
        for (i, (name, p)) in store.iter().enumerate() {
            for (slot, which) in [(&mut self.m[i], "m"), (&mut self.v[i], "v")] {
                let t = ck.get_tensor::<f32>(&format!("{prefix}/{which}/{name}"))?;
                if t.shape() != p.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{prefix}/{which}/{name}: shape mismatch"
                    )));
                }
                *slot = t;
            }
        }
        Ok(())
    }
}

/// One training clip in model range `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `[window, 3, H, W]`.
    pub frames: Tensor<f32>,
    /// `[window, 1, H, W]`, 1 marks a hole.
    pub masks: Tensor<f32>,
    pub indices: Vec<usize>,
}

/// Where training videos come from.
#[derive(Clone, Debug)]
pub enum ClipSource {
    Synthetic,
    /// Videos as `[T, 3, H, W]` in `[0, 1]`.
    Videos(Vec<Tensor<f64>>),
}

impl ClipSource {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        if cfg.data_dir.is_empty() {
            return Ok(Self::Synthetic);
        }
        let videos = list_videos(Path::new(&cfg.data_dir))?
            .iter()
            .map(|v| read_frames(&v.frames()))
            .collect::<Result<Vec<_>>>()?;
        if videos.is_empty() {
            return Err(Error::InvalidInput(format!("{}: no videos", cfg.data_dir)));
        }
        for v in &videos {
            let s = v.shape();
            if s[0] < cfg.window || (s[2], s[3]) != (cfg.frame_height, cfg.frame_width) {
                return Err(Error::InvalidInput(format!(
                    "{}: video {s:?} does not fit window {} at {}x{}",
                    cfg.data_dir, cfg.window, cfg.frame_width, cfg.frame_height
                )));
            }
        }
        Ok(Self::Videos(videos))
    }
}

/// Frame indices for one clip: consecutive or scattered with equal
/// probability, sorted.
pub fn clip_indices(total: usize, window: usize, rng: &mut impl Rng) -> Vec<usize> {
    if rng.random_bool(0.5) {
        let start = rng.random_range(0..=total - window);
        (start..start + window).collect()
    } else {
        let mut idx = sample(rng, total, window).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// The clip for `step`, a pure function of the seed and the step.
pub fn draw_sample(cfg: &Config, source: &ClipSource, step: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, step));
    let video = match source {
        ClipSource::Synthetic => {
            let spec = SceneSpec::random(
                cfg.frame_width,
                cfg.frame_height,
                cfg.source_frames,
                cfg.sprites,
                rng.random(),
            );
            generate_clip(&spec)?.frames
        }
        ClipSource::Videos(v) => v[rng.random_range(0..v.len())].clone(),
    };
    let indices = clip_indices(video.shape()[0], cfg.window, &mut rng);
    let frames = select_frames(&video, &indices)?
        .map(|x| 2.0 * x - 1.0)
        .cast::<f32>();
    let mask = generate_stationary_mask(&cfg.mask_spec(rng.random()))?;
    Ok(Sample {
        frames,
        masks: stationary_sequence(&mask, cfg.window),
        indices,
    })
}

/// Samples for `start..end`, generated on a producer thread feeding a
/// bounded queue when `threaded`. Both paths yield identical samples.
pub fn sample_stream(
    cfg: &Config,
    source: Arc<ClipSource>,
    start: u64,
    end: u64,
    threaded: bool,
) -> Box<dyn Iterator<Item = Result<Sample>>> {
    let cfg = cfg.clone();
    if !threaded {
        return Box::new((start..end).map(move |s| draw_sample(&cfg, &source, s)));
    }
    let (tx, rx) = sync_channel(4);
    std::thread::spawn(move || {
        for s in start..end {
            if tx.send(draw_sample(&cfg, &source, s)).is_err() {
                break;
            }
        }
    });
    Box::new(rx.into_iter())
}

/// Frames with hole pixels set to zero.
pub fn zero_holes(frames: &Tensor<f32>, masks: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = frames.shape();
    if s.len() != 4 || masks.shape() != [s[0], 1, s[2], s[3]] {
        return Err(Error::shape(format!(
            "masks {:?} do not match frames {s:?}",
            masks.shape()
        )));
    }
    let plane = s[2] * s[3];
    let c = s[1];
    Ok(Tensor::from_fn(s.to_vec(), |i| {
        let m = masks.data()[(i / (c * plane)) * plane + i % plane];
        frames.data()[i] * (1.0 - m)
    }))
}

/// One discriminator update on `real` and detached `fake` clips. The first
/// forward advances the spectral-norm power iteration.
fn disc_step(
    disc: &mut Discriminator,
    params: &mut ParamStore<f32>,
    opt: &mut Adam,
    real: &Tensor<f32>,
    fake: &Tensor<f32>,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::<f32>::new();
    let mut dp = ParamBinding::new(params, true);
    let r = tape.constant(real.clone());
    let r = frames_to_video(&mut tape, r)?;
    let real_scores = disc.forward(&mut tape, &mut dp, r, true)?;
    let f = tape.constant(fake.clone());
    let f = frames_to_video(&mut tape, f)?;
    let fake_scores = disc.forward(&mut tape, &mut dp, f, false)?;
    let loss = d_loss(&mut tape, real_scores, fake_scores)?;
    let value = tape.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite("discriminator loss".into()));
    }
    tape.backward(loss)?;
    let grads = dp.grads(&tape);
    if !grads_finite(&grads) {
        return Err(Error::NonFinite("discriminator gradients".into()));
    }
    opt.step(params, &grads, lr);
    Ok(value)
}

pub struct Trainer {
    pub cfg: Config,
    pub model: ModelConfig,
    pub generator: Generator,
    pub gen_params: ParamStore<f32>,
    pub discriminator: Discriminator,
    pub disc_params: ParamStore<f32>,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    /// Completed steps.
    pub step: u64,
}

fn finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

fn grads_finite(grads: &[Tensor<f32>]) -> bool {
    grads.iter().all(Tensor::all_finite)
}

impl Trainer {
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let model = cfg.model()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut gen_params = ParamStore::new();
        let generator = Generator::new(&model, &mut gen_params, &mut rng)?;
        let mut disc_params = ParamStore::new();
        let discriminator = Discriminator::new(&model.disc_channels, &mut disc_params, &mut rng);
        Ok(Self {
            gen_opt: Adam::new(&gen_params, cfg),
            disc_opt: Adam::new(&disc_params, cfg),
            cfg: cfg.clone(),
            model,
            generator,
            gen_params,
            discriminator,
            disc_params,
            step: 0,
        })
    }

    pub fn adversarial(&self) -> bool {
        self.cfg.lambda_adv > 0.0
    }

    /// Discriminator update (when adversarial), then generator update.
    pub fn train_step(&mut self, sample: &Sample) -> Result<LossRecord> {
        let lr = learning_rate(&self.cfg, self.step);
        let weights = self.cfg.loss_weights();
        let adversarial = self.adversarial();
        let masks = &sample.masks;

        let mut tape = Tape::<f32>::new();
        let mut gp = ParamBinding::new(&self.gen_params, true);
        let target = tape.constant(sample.frames.clone());
        let x = tape.constant(zero_holes(&sample.frames, masks)?);
        let pred = self.generator.forward(&mut tape, &mut gp, x, masks, None)?;
        let l_hole = l1_hole(&mut tape, target, pred, masks)?;
        let l_valid = l1_valid(&mut tape, target, pred, masks)?;
        let comp = composite(&mut tape, pred, target, masks)?;

        let mut record = LossRecord {
            step: self.step + 1,
            l_hole: tape.value(l_hole).item() as f64,
            l_valid: tape.value(l_valid).item() as f64,
            l_adv: 0.0,
            l_d: 0.0,
        };
        if !finite(&[record.l_hole, record.l_valid]) {
            drop(gp);
            return Err(self.nan_abort(&record, "reconstruction loss"));
        }

        let l_adv = if adversarial {
            let fake = tape.value(comp).clone();
            match disc_step(
                &mut self.discriminator,
                &mut self.disc_params,
                &mut self.disc_opt,
                &sample.frames,
                &fake,
                lr,
            ) {
                Ok(v) => record.l_d = v,
                Err(Error::NonFinite(what)) => {
                    drop(gp);
                    return Err(self.nan_abort(&record, &what));
                }
                Err(e) => return Err(e),
            }
            let mut dp = ParamBinding::new(&self.disc_params, false);
            let video = frames_to_video(&mut tape, comp)?;
            let scores = self
                .discriminator
                .forward(&mut tape, &mut dp, video, false)?;
            g_adv_loss(&mut tape, scores)
        } else {
            tape.constant(Tensor::scalar(0.0))
        };
        let total = total_loss(&mut tape, l_hole, l_valid, l_adv, &weights)?;
        record.l_adv = tape.value(l_adv).item() as f64;
        if !finite(&[record.l_adv, tape.value(total).item() as f64])
            || tape.first_non_finite().is_some()
        {
            drop(gp);
            return Err(self.nan_abort(&record, "loss"));
        }
        tape.backward(total)?;
        let grads = gp.grads(&tape);
        drop(gp);
        if !grads_finite(&grads) {
            return Err(self.nan_abort(&record, "generator gradients"));
        }
        self.gen_opt.step(&mut self.gen_params, &grads, lr);
        self.step += 1;
        Ok(record)
    }

    /// Writes a diagnostic dump next to the checkpoint and builds the error.
    fn nan_abort(&self, record: &LossRecord, what: &str) -> Error {
        let mut text = format!(
            "non-finite {what} at step {}\nconfig digest {}\nlosses {record:?}\n",
            record.step,
            self.cfg.digest()
        );
        for (store, tag) in [(&self.gen_params, "gen"), (&self.disc_params, "disc")] {
            for (name, p) in store.iter() {
                let bad = p.data().iter().filter(|v| !v.is_finite()).count();
                text += &format!("{tag} {name} max_abs {} non_finite {bad}\n", p.max_abs());
            }
        }
        let path = Path::new(&self.cfg.out_dir).join(NAN_DUMP_FILE);
        let _ = io::atomic_write(&path, text.as_bytes());
        Error::NonFinite(format!(
            "{what} at step {} (dump: {})",
            record.step,
            path.display()
        ))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(&self.cfg.digest())?;
        ck.put("config", self.cfg.canonical().into_bytes());
        ck.put_u64("state/step", self.step);
        // Every sample is derived from (seed, step), so this pair is the
        // whole data RNG state.
        ck.put_u64("rng/seed", self.cfg.seed);
        ck.put_u64("rng/counter", self.step);
        for (name, p) in self.gen_params.iter() {
            ck.put_tensor(&format!("gen/{name}"), p);
        }
        for (name, p) in self.disc_params.iter() {
            ck.put_tensor(&format!("disc/{name}"), p);
        }
        for (i, layer) in self.discriminator.layers.iter().enumerate() {
            ck.put_f64s(&format!("spectral/{i}/u"), &layer.spectral.u);
            ck.put_f64s(&format!("spectral/{i}/v"), &layer.spectral.v);
            ck.put_u64(
                &format!("spectral/{i}/iterations"),
                layer.spectral.iterations,
            );
        }
        self.gen_opt.save(&mut ck, "opt/gen", &self.gen_params);
        self.disc_opt.save(&mut ck, "opt/disc", &self.disc_params);
        Ok(ck)
    }

    pub fn from_checkpoint(cfg: &Config, ck: &Checkpoint) -> Result<Self> {
        if ck.digest_hex() != cfg.digest() {
            return Err(Error::Checkpoint(format!(
                "checkpoint digest {} does not match config {}",
                ck.digest_hex(),
                cfg.digest()
            )));
        }
        let mut t = Self::new(cfg)?;
        t.step = ck.get_u64("state/step")?;
        load_store(&mut t.gen_params, ck, "gen")?;
        load_store(&mut t.disc_params, ck, "disc")?;
        for (i, layer) in t.discriminator.layers.iter_mut().enumerate() {
            let u = ck.get_f64s(&format!("spectral/{i}/u"))?;
            let v = ck.get_f64s(&format!("spectral/{i}/v"))?;
            if u.len() != layer.spectral.u.len() || v.len() != layer.spectral.v.len() {
                return Err(Error::Checkpoint(format!("spectral/{i}: size mismatch")));
            }
            layer.spectral.u = u;
            layer.spectral.v = v;
            layer.spectral.iterations = ck.get_u64(&format!("spectral/{i}/iterations"))?;
        }
        t.gen_opt.load(ck, "opt/gen", &t.gen_params)?;
        t.disc_opt.load(ck, "opt/disc", &t.disc_params)?;
        Ok(t)
    }
}

/// Replaces every value of `store` with the `prefix/<name>` blob.
pub fn load_store(store: &mut ParamStore<f32>, ck: &Checkpoint, prefix: &str) -> Result<()> {
    let values = store
        .iter()
        .map(|(name, _)| ck.get_tensor::<f32>(&format!("{prefix}/{name}")))
        .collect::<Result<Vec<_>>>()?;
    store
        .load_values(values)
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub last: Option<LossRecord>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Runs `cfg.steps` steps (continuing a previous run when `cfg.resume` and a
/// checkpoint exists). `progress` sees every loss record.
pub fn train(cfg: &Config, mut progress: impl FnMut(&LossRecord)) -> Result<TrainSummary> {
    let out = PathBuf::from(&cfg.out_dir);
    let ck_path = out.join(CHECKPOINT_FILE);
    let log_path = out.join(LOG_FILE);
    let mut trainer = if cfg.resume && ck_path.is_file() {
        Trainer::from_checkpoint(cfg, &Checkpoint::load(&ck_path, Some(&cfg.digest()))?)?
    } else {
        Trainer::new(cfg)?
    };

    // Keep only log rows covered by the starting state.
    let kept: Vec<LossRecord> = if trainer.step > 0 && log_path.is_file() {
        read_loss_log(&log_path)?
            .into_iter()
            .filter(|r| r.step <= trainer.step)
            .collect()
    } else {
        Vec::new()
    };
    let mut buf = csv::Writer::from_writer(Vec::new());
    for r in &kept {
        buf.serialize(r)?;
    }
    let bytes = buf
        .into_inner()
        .map_err(|e| Error::io(&log_path, e.into_error()))?;
    io::atomic_write(&log_path, &bytes)?;
    let mut log = LossLog::open(&log_path)?;

    let source = Arc::new(ClipSource::from_config(cfg)?);
    let mut last = None;
    let stream = sample_stream(cfg, source, trainer.step, cfg.steps, cfg.threaded_data);
    for sample in stream {
        let record = trainer.train_step(&sample?)?;
        if record.step % cfg.log_every == 0 || record.step == cfg.steps {
            log.append(&record)?;
        }
        progress(&record);
        if record.step % cfg.checkpoint_every == 0 && record.step != cfg.steps {
            trainer.to_checkpoint()?.save(&ck_path)?;
        }
        last = Some(record);
    }
    trainer.to_checkpoint()?.save(&ck_path)?;
    Ok(TrainSummary {
        steps: trainer.step,
        last,
        checkpoint: ck_path,
        log: log_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(out: &Path) -> Config {
        Config::parse(
            "frame_width = 16\nframe_height = 16\nencoder_channels = [4, 4, 8, 8]\n\
             decoder_channels = [8, 4, 4]\nheads = \"4x4,2x2\"\ndisc_channels = [4, 4]\n\
             steps = 4\nsource_frames = 8\nsprites = 2\nlr = 0.001\n",
            &[format!("out_dir=\"{}\"", out.display())],
        )
        .unwrap()
    }

    #[test]
    fn schedule_decays_by_factor() {
        let cfg = Config {
            lr_decay_step: 10,
            ..Config::default()
        };
        assert_eq!(learning_rate(&cfg, 0), 1e-4);
        assert_eq!(learning_rate(&cfg, 9), 1e-4);
        assert!((learning_rate(&cfg, 10) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::from_f64([2], &[1.0, -1.0]).unwrap());
        let mut opt = Adam::new(&store, &Config::default());
        let g = vec![Tensor::from_f64([2], &[3.0, -0.5]).unwrap()];
        opt.step(&mut store, &g, 0.1);
        let w = store.values()[0].data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clip_indices_sorted_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut kinds = [0, 0];
        for _ in 0..200 {
            let idx = clip_indices(20, 5, &mut rng);
            assert_eq!(idx.len(), 5);
            assert!(idx.windows(2).all(|w| w[0] < w[1]) && idx[4] < 20);
            kinds[(idx[4] - idx[0] == 4) as usize] += 1;
        }
        assert!(kinds[0] > 50 && kinds[1] > 50);
    }

    #[test]
    fn samples_deterministic_and_thread_agnostic() {
        let cfg = tiny_config(Path::new("unused"));
        let src = Arc::new(ClipSource::Synthetic);
        let a: Vec<_> = sample_stream(&cfg, src.clone(), 0, 3, false)
            .map(Result::unwrap)
            .collect();
        let b: Vec<_> = sample_stream(&cfg, src, 0, 3, true)
            .map(Result::unwrap)
            .collect();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.frames.data(), y.frames.data());
            assert_eq!(x.masks.data(), y.masks.data());
        }
        assert!(a[0].frames.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(&dir.path().join("full"));
        let full = train(&cfg, |_| {}).unwrap();
        let rows = read_loss_log(&full.log).unwrap();
        assert_eq!(
            rows.iter().map(|r| r.step).collect::<Vec<_>>(),
            vec![1, 2, 3, 4]
        );

        let src = ClipSource::Synthetic;
        let mut first = Trainer::new(&cfg).unwrap();
        for s in 0..2 {
            first
                .train_step(&draw_sample(&cfg, &src, s).unwrap())
                .unwrap();
        }
        let bytes = first.to_checkpoint().unwrap().encode();
        let mut cont =
            Trainer::from_checkpoint(&cfg, &Checkpoint::decode(&bytes).unwrap()).unwrap();
        let mut last = None;
        for s in 2..4 {
            last = Some(
                cont.train_step(&draw_sample(&cfg, &src, s).unwrap())
                    .unwrap(),
            );
        }
        assert_eq!(full.last.unwrap(), last.unwrap());
        let full_ck = Checkpoint::load(&full.checkpoint, Some(&cfg.digest())).unwrap();
        for (name, p) in cont.gen_params.iter() {
            assert_eq!(
                full_ck
                    .get_tensor::<f32>(&format!("gen/{name}"))
                    .unwrap()
                    .data(),
                p.data()
            );
        }
        for (name, p) in cont.disc_params.iter() {
            assert_eq!(
                full_ck
                    .get_tensor::<f32>(&format!("disc/{name}"))
                    .unwrap()
                    .data(),
                p.data()
            );
        }
    }

    #[test]
    fn resume_via_train_keeps_log_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.checkpoint_every = 2;
        train(&cfg, |_| {}).unwrap();
        cfg.resume = true;
        let again = train(&cfg, |_| {}).unwrap();
        assert_eq!(again.steps, 4);
        assert_eq!(read_loss_log(&again.log).unwrap().len(), 4);
    }

    #[test]
    fn nonfinite_loss_aborts_with_dump() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let mut t = Trainer::new(&cfg).unwrap();
        let mut s = draw_sample(&cfg, &ClipSource::Synthetic, 0).unwrap();
        s.frames.data_mut()[0] = f32::NAN;
        let err = t.train_step(&s).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert!(dir.path().join(NAN_DUMP_FILE).is_file());
        assert_eq!(t.step, 0);
    }

    #[test]
    fn checkpoint_rejects_other_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let ck = Trainer::new(&cfg).unwrap().to_checkpoint().unwrap();
        let mut other = cfg.clone();
        other.seed = 5;
        assert!(Trainer::from_checkpoint(&other, &ck).is_err());
        assert!(Trainer::from_checkpoint(&cfg, &ck).is_ok());
    }
}
