//! Adam optimization with a single cosine-annealed learning-rate cycle,
//! the seeded training loop, CSV logging and exact-resume checkpointing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{save_model, Record};
use crate::data::{augment, extract_patches, mix_seed, target_pyramid, Image, ImagePair};
use crate::error::{Error, Result};
use crate::loss::{psnr, total_loss, LossConfig};
use crate::network::Model;
use crate::tensor::{no_grad, with_finite_checks, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub patch_size: usize,
    /// Global-norm gradient clipping threshold; off by default.
    pub clip_grad: Option<f64>,
    /// Validation PSNR cadence in steps (0 disables).
    pub val_every: usize,
    /// Checkpoint cadence in steps (0 saves only at the end).
    pub save_every: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 2e-4,
            lr_final: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            total_steps: 2000,
            seed: 0,
            patch_size: 32,
            clip_grad: None,
            val_every: 200,
            save_every: 500,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=self.lr_init).contains(&self.lr_final) {
            return Err(Error::config(format!(
                "lr_final {} must lie in [0, lr_init {}]",
                self.lr_final, self.lr_init
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} {b} must lie in [0, 1)")));
            }
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::config("batch_size and total_steps must be >= 1".to_string()));
        }
        if self.patch_size % 4 != 0 {
            return Err(Error::config(format!(
                "patch_size {} must be divisible by 4",
                self.patch_size
            )));
        }
        Ok(())
    }
}

/// Single-cycle cosine annealing:
/// lr(t) = lr_final + ½(lr_init − lr_final)(1 + cos(πt/T)).
pub fn cosine_lr(t: usize, cfg: &TrainConfig) -> f64 {
    let frac = t as f64 / cfg.total_steps as f64;
    cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adam first/second moment buffers, aligned with the model's stable
/// parameter order.
pub struct AdamState<T: Scalar> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[(String, Tensor<T>)]) -> Self {
        AdamState {
            m: params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn to_records(&self, params: &[(String, Tensor<T>)]) -> Vec<Record<T>> {
        let mut out = Vec::with_capacity(2 * params.len() + 1);
        out.push(Record::new("opt.step", vec![1], vec![T::from_f64(self.t as f64)]));
        for (i, (name, p)) in params.iter().enumerate() {
            out.push(Record::new(format!("opt.m.{name}"), p.shape().to_vec(), self.m[i].clone()));
            out.push(Record::new(format!("opt.v.{name}"), p.shape().to_vec(), self.v[i].clone()));
        }
        out
    }

    /// Rebuild the state from checkpoint leftovers; missing records mean a
    /// fresh optimizer.
    pub fn from_records(params: &[(String, Tensor<T>)], records: &[Record<T>]) -> Result<Self> {
        let mut state = AdamState::new(params);
        let find = |name: &str| records.iter().find(|r| r.name == name);
        let Some(step) = find("opt.step") else {
            return Ok(state);
        };
        state.t = step.data[0].as_f64() as u64;
        for (i, (name, p)) in params.iter().enumerate() {
            for (buf, prefix) in [(&mut state.m[i], "opt.m."), (&mut state.v[i], "opt.v.")] {
                let full = format!("{prefix}{name}");
                let rec = find(&full).ok_or_else(|| {
                    Error::decode("checkpoint", format!("optimizer record `{full}` missing"))
                })?;
                if rec.data.len() != p.numel() {
                    return Err(Error::decode(
                        "checkpoint",
                        format!("optimizer record `{full}` has wrong size"),
                    ));
                }
                buf.copy_from_slice(&rec.data);
            }
        }
        Ok(state)
    }
}

/// One bias-corrected Adam update over all parameters.
pub fn adam_step<T: Scalar>(
    params: &[(String, Tensor<T>)],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) {
    state.t += 1;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let eps = T::from_f64(cfg.adam_eps);
    let bc1 = T::from_f64(1.0 - cfg.beta1.powi(state.t as i32));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powi(state.t as i32));
    let lr_t = T::from_f64(lr);
    for (i, (_, p)) in params.iter().enumerate() {
        let grad = p.grad().unwrap_or_else(|| vec![T::zero(); p.numel()]);
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        p.update_data(|data| {
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] = data[j] - lr_t * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
fn clip_gradients<T: Scalar>(params: &[(String, Tensor<T>)], max_norm: f64) {
    let mut total = 0.0f64;
    for (_, p) in params {
        if let Some(g) = p.grad() {
            total += g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
        }
    }
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, p) in params {
            if let Some(g) = p.grad() {
                let scaled: Vec<T> = g.iter().map(|v| T::from_f64(v.as_f64() * scale)).collect();
                p.zero_grad();
                p.accumulate_grad(&scaled);
            }
        }
    }
}

fn image_to_tensor<T: Scalar>(img: &Image) -> Tensor<T> {
    let data: Vec<T> = img.data.iter().map(|v| T::from_f64(*v as f64)).collect();
    Tensor::from_vec(data, &[1, 3, img.h, img.w]).expect("image dims consistent")
}

fn stack_batch<T: Scalar>(images: &[&Image]) -> Tensor<T> {
    let (h, w) = (images[0].h, images[0].w);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        data.extend(img.data.iter().map(|v| T::from_f64(*v as f64)));
    }
    Tensor::from_vec(data, &[images.len(), 3, h, w]).expect("image dims consistent")
}

/// Mean PSNR (dB) of restored outputs over a validation set.
pub fn validation_psnr<T: Scalar>(model: &Model<T>, pairs: &[ImagePair]) -> Result<f64> {
    let mut acc = 0.0;
    for pair in pairs {
        let restored = no_grad(|| infer_image(model, &pair.degraded))?;
        acc += psnr(&restored.data, &pair.sharp.data, 1.0);
    }
    Ok(acc / pairs.len() as f64)
}

/// Restore one image: forward pass on the full-resolution output, clamped
/// to [0,1]. Sizes not divisible by 4 are reflect-padded and cropped back.
pub fn infer_image<T: Scalar>(model: &Model<T>, img: &Image) -> Result<Image> {
    let min = model.cfg.min_input_size();
    let (ph, pw) = (
        img.h.max(min).div_ceil(4) * 4,
        img.w.max(min).div_ceil(4) * 4,
    );
    let padded = if (ph, pw) == (img.h, img.w) {
        img.clone()
    } else {
        let mut out = Image::new(ph, pw);
        for c in 0..3 {
            for y in 0..ph {
                for x in 0..pw {
                    let sy = if y < img.h { y } else { 2 * img.h - 2 - y.min(2 * img.h - 2) };
                    let sx = if x < img.w { x } else { 2 * img.w - 2 - x.min(2 * img.w - 2) };
                    *out.at_mut(c, y, x) = img.at(c, sy.min(img.h - 1), sx.min(img.w - 1));
                }
            }
        }
        out
    };
    let input = image_to_tensor::<T>(&padded);
    let outputs = no_grad(|| model.forward(&input))?;
    let full = outputs[0].data();
    let mut restored = Image::new(img.h, img.w);
    for c in 0..3 {
        for y in 0..img.h {
            for x in 0..img.w {
                let v = full[(c * ph + y) * pw + x].as_f64() as f32;
                *restored.at_mut(c, y, x) = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(restored)
}

/// Sibling path for a periodic snapshot: `model.sfaf` -> `model.sfaf.step500`.
pub fn step_checkpoint_path(base: &Path, step: usize) -> PathBuf {
    let mut name = base.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".step{step}"));
    base.with_file_name(name)
}

pub struct TrainReport {
    pub steps_run: usize,
    pub final_loss: f64,
    pub final_val_psnr: Option<f64>,
    pub checkpoint: PathBuf,
}

/// Run the seeded training loop from `state.t` to `cfg.total_steps`,
/// writing the checkpoint (with optimizer state) and an optional CSV log.
/// Training is a pure function of (seed, config, corpus).
pub fn train<T: Scalar>(
    model: &Model<T>,
    state: &mut AdamState<T>,
    train_set: &[ImagePair],
    val_set: &[ImagePair],
    cfg: &TrainConfig,
    out_ckpt: &Path,
    log_csv: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::contract("training set is empty".to_string()));
    }
    if cfg.patch_size < model.cfg.min_input_size() {
        return Err(Error::config(format!(
            "patch_size {} below the architecture minimum {}",
            cfg.patch_size,
            model.cfg.min_input_size()
        )));
    }
    let params = model.named_params();
    let mut log = match log_csv {
        Some(path) => {
            let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
            let mut w = BufWriter::new(file);
            writeln!(w, "step,lr,loss_total,loss_char,loss_edge,loss_freq,val_psnr")
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            Some((w, path.to_path_buf()))
        }
        None => None,
    };

    let mut final_loss = f64::NAN;
    let mut final_val = None;
    let start = state.t as usize;
    for step in start + 1..=cfg.total_steps {
        let lr = cosine_lr(step - 1, cfg);
        let step_rng = &mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, step as u64));

        // Assemble the batch: one random augmented patch per drawn image.
        let mut degraded = Vec::with_capacity(cfg.batch_size);
        let mut pyramids = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let pair = &train_set[step_rng.gen_range(0..train_set.len())];
            let patch = extract_patches(pair, cfg.patch_size, 1, step_rng.gen())?.remove(0);
            let patch = augment(&patch, step_rng.gen());
            pyramids.push(target_pyramid(&patch.sharp)?);
            degraded.push(patch.degraded);
        }
        let input = stack_batch::<T>(&degraded.iter().collect::<Vec<_>>());
        let targets: Vec<Tensor<T>> = (0..4)
            .map(|lvl| stack_batch::<T>(&pyramids.iter().map(|p| &p[lvl]).collect::<Vec<_>>()))
            .collect();

        let outputs = model.forward(&input)?;
        let (loss, parts) = total_loss(&outputs, &targets, &cfg.loss)?;
        let loss_val = loss.item().as_f64();
        if !loss_val.is_finite() {
            return Err(diagnose_non_finite(model, &input, &targets, cfg, step));
        }

        model.zero_grads();
        crate::tensor::backward(&loss)?;
        if let Some(max_norm) = cfg.clip_grad {
            clip_gradients(&params, max_norm);
        }
        adam_step(&params, state, lr, cfg);
        final_loss = loss_val;

        let val = if cfg.val_every > 0 && !val_set.is_empty() && step % cfg.val_every == 0 {
            let p = validation_psnr(model, val_set)?;
            final_val = Some(p);
            Some(p)
        } else {
            None
        };
        if let Some((w, path)) = log.as_mut() {
            let val_col = val.map_or(String::new(), |p| format!("{p:.4}"));
            writeln!(
                w,
                "{step},{lr:.8e},{loss_val:.8e},{:.8e},{:.8e},{:.8e},{val_col}",
                parts.charbonnier, parts.edge, parts.freq
            )
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        if cfg.save_every > 0 && step % cfg.save_every == 0 && step != cfg.total_steps {
            save_model(&step_checkpoint_path(out_ckpt, step), model, &state.to_records(&params))?;
        }
    }
    save_model(out_ckpt, model, &state.to_records(&params))?;
    if let Some((w, path)) = log.as_mut() {
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(TrainReport {
        steps_run: cfg.total_steps.saturating_sub(start),
        final_loss,
        final_val_psnr: final_val,
        checkpoint: out_ckpt.to_path_buf(),
    })
}

/// Rerun the failing forward with per-op finiteness checks to name the
/// first offending op, and scan parameters for corruption.
fn diagnose_non_finite<T: Scalar>(
    model: &Model<T>,
    input: &Tensor<T>,
    targets: &[Tensor<T>],
    cfg: &TrainConfig,
    step: usize,
) -> Error {
    for (name, p) in model.named_params() {
        if !p.all_finite() {
            return Error::Degenerate(format!(
                "non-finite loss at step {step}: parameter `{name}` contains NaN/Inf"
            ));
        }
    }
    let err = with_finite_checks(|| -> Result<()> {
        let outputs = model.forward(input)?;
        total_loss(&outputs, targets, &cfg.loss)?;
        Ok(())
    });
    match err {
        Err(Error::NonFinite { op }) => Error::Degenerate(format!(
            "non-finite loss at step {step}: eager op `{op}` produced the first NaN/Inf output"
        )),
        _ => Error::Degenerate(format!("non-finite loss at step {step}: source not located")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::load_model;
    use crate::data::{write_corpus, BlurKind};
    use crate::network::{ArchConfig, FilterMode};
    use tempfile::tempdir;

    fn tiny_cfg() -> ArchConfig {
        ArchConfig {
            base_channels: 4,
            naf_blocks: 1,
            rows: 2,
            kernel: 3,
            filter: FilterMode::Learned,
        }
    }

    fn short_train_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            total_steps: steps,
            batch_size: 2,
            patch_size: 16,
            val_every: 0,
            save_every: 0,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig::default(); // 2000 steps, 2e-4 -> 1e-6
        assert!((cosine_lr(0, &cfg) - 2e-4).abs() < 1e-18);
        assert!((cosine_lr(2000, &cfg) - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(1000, &cfg) - 1.005e-4).abs() < 1e-12);

        // Monotone non-increasing over the whole cycle.
        let mut last = f64::INFINITY;
        for t in 0..=2000 {
            let lr = cosine_lr(t, &cfg);
            assert!(lr <= last + 1e-18);
            last = lr;
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let p = Tensor::<f64>::full(&[3], 1.5).requires_grad(true);
        let params = vec![("p".to_string(), p.clone())];
        let mut state = AdamState::new(&params);
        p.accumulate_grad(&[0.0, 0.0, 0.0]);
        adam_step(&params, &mut state, 1e-3, &TrainConfig::default());
        assert_eq!(p.data(), vec![1.5, 1.5, 1.5]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let p = Tensor::<f64>::full(&[2], 0.0).requires_grad(true);
        let params = vec![("p".to_string(), p.clone())];
        let mut state = AdamState::new(&params);
        p.accumulate_grad(&[0.37, -2.2]);
        let lr = 1e-3;
        adam_step(&params, &mut state, lr, &TrainConfig::default());
        let got = p.data();
        // Bias-corrected first step: mhat/sqrt(vhat) = sign(g) (up to eps).
        assert!((got[0] + lr).abs() < 1e-6);
        assert!((got[1] - lr).abs() < 1e-6);
    }

    #[test]
    fn training_runs_are_bit_identical() {
        let dir = tempdir().unwrap();
        write_corpus(dir.path(), 4, 3, BlurKind::Gaussian { sigma: 1.5 }, 0.0, 16).unwrap();
        let train_set = crate::data::load_dataset(&dir.path().join("train")).unwrap();

        let mut outs = Vec::new();
        for run in 0..2 {
            let model = Model::<f32>::new(&tiny_cfg(), 1).unwrap();
            let mut state = AdamState::new(&model.named_params());
            let ckpt = dir.path().join(format!("run{run}.sfaf"));
            train(&model, &mut state, &train_set, &[], &short_train_cfg(12), &ckpt, None).unwrap();
            outs.push(std::fs::read(&ckpt).unwrap());
        }
        assert_eq!(outs[0], outs[1], "identical seeds must give bit-identical checkpoints");
    }

    #[test]
    fn resume_matches_unbroken_run_exactly() {
        let dir = tempdir().unwrap();
        write_corpus(dir.path(), 4, 9, BlurKind::Gaussian { sigma: 1.5 }, 0.0, 16).unwrap();
        let train_set = crate::data::load_dataset(&dir.path().join("train")).unwrap();

        // Unbroken run: 20 steps, snapshotting at step 10.
        let model_a = Model::<f32>::new(&tiny_cfg(), 2).unwrap();
        let mut state_a = AdamState::new(&model_a.named_params());
        let ckpt_a = dir.path().join("full.sfaf");
        let mut cfg = short_train_cfg(20);
        cfg.save_every = 10;
        train(&model_a, &mut state_a, &train_set, &[], &cfg, &ckpt_a, None).unwrap();

        // Resume from the step-10 snapshot and run the remaining 10 steps.
        let snapshot = step_checkpoint_path(&ckpt_a, 10);
        let (resumed, leftovers) = load_model::<f32>(&snapshot).unwrap();
        let params = resumed.named_params();
        let mut state_b = AdamState::from_records(&params, &leftovers).unwrap();
        assert_eq!(state_b.t, 10);
        let ckpt_b = dir.path().join("resumed.sfaf");
        train(&resumed, &mut state_b, &train_set, &[], &cfg, &ckpt_b, None).unwrap();

        assert_eq!(
            std::fs::read(&ckpt_a).unwrap(),
            std::fs::read(&ckpt_b).unwrap(),
            "resumed run must reproduce the unbroken run bit-for-bit"
        );
    }

    #[test]
    fn loss_descends_on_small_corpus() {
        let dir = tempdir().unwrap();
        write_corpus(dir.path(), 5, 11, BlurKind::Gaussian { sigma: 1.5 }, 0.0, 16).unwrap();
        let train_set = crate::data::load_dataset(&dir.path().join("train")).unwrap();
        assert_eq!(train_set.len(), 3);

        let model = Model::<f32>::new(&tiny_cfg(), 4).unwrap();
        let mut state = AdamState::new(&model.named_params());
        let ckpt = dir.path().join("descent.sfaf");
        let log = dir.path().join("log.csv");
        let mut cfg = short_train_cfg(50);
        // A hotter rate and whole-image batches make 50 steps decisive
        // against batch-composition noise on such a tiny corpus.
        cfg.lr_init = 3e-3;
        cfg.batch_size = 3;
        train(&model, &mut state, &train_set, &[], &cfg, &ckpt, Some(&log)).unwrap();

        let text = std::fs::read_to_string(&log).unwrap();
        let losses: Vec<f64> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
            .collect();
        assert_eq!(losses.len(), 50);
        let early: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let late: f64 = losses[40..].iter().sum::<f64>() / 10.0;
        assert!(
            late < early,
            "smoothed loss must descend: early {early:.5} vs late {late:.5}"
        );
    }

    #[test]
    fn infer_pads_odd_sizes() {
        let model = Model::<f32>::new(&tiny_cfg(), 0).unwrap();
        model.zero_heads();
        let img = crate::data::synth_texture(1, 2, 16);
        let mut odd = Image::new(13, 15);
        for c in 0..3 {
            for y in 0..13 {
                for x in 0..15 {
                    *odd.at_mut(c, y, x) = img.at(c, y, x);
                }
            }
        }
        let restored = infer_image(&model, &odd).unwrap();
        assert_eq!((restored.h, restored.w), (13, 15));
        assert_eq!(restored.data, odd.data, "zero heads keep infer an identity");
    }
}
