//! Fitting a GOP to its frames with Adam on the L2 loss.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::{Adam, AdamConfig};
use crate::deform::{deform, deform_backward, FieldMode, GopGradient, GopModel, TriPlane};
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian2D, PARAMS_PER_GAUSSIAN};
use crate::quant::{fake_quantize, BitPlan};
use crate::raster::{render_backward, render_with, Frame, RenderOptions};
use crate::real::Real;
use crate::video::psnr;

/// Order in which training frames are visited, one frame per step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FrameSampling {
    /// Every frame once per epoch, reshuffled each epoch from the seed.
    #[default]
    Shuffled,
    /// `0, 1, .., n-1, 0, 1, ..`
    Cyclic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub num_gaussians: usize,
    pub iterations: usize,
    pub lr_position: f64,
    pub lr_other: f64,
    pub adam: AdamConfig,
    pub qat_iterations: usize,
    pub sampling: FrameSampling,
    pub seed: u64,
    pub mode: FieldMode,
    pub render: RenderOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_gaussians: 512,
            iterations: 5000,
            lr_position: 0.0025,
            lr_other: 0.01,
            adam: AdamConfig::default(),
            qat_iterations: 500,
            sampling: FrameSampling::default(),
            seed: 0,
            mode: FieldMode::Hybrid,
            render: RenderOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_position > 0.0 && self.lr_other > 0.0) {
            return Err(Error::InvalidParameter(
                "learning rates must be positive".into(),
            ));
        }
        if self.num_gaussians == 0 {
            return Err(Error::InvalidParameter("need at least one gaussian".into()));
        }
        Ok(())
    }

    fn learning_rate(&self, gaussian_params: usize) -> impl Fn(usize) -> f64 + '_ {
        move |i| {
            if i < gaussian_params && i % PARAMS_PER_GAUSSIAN < 2 {
                self.lr_position
            } else {
                self.lr_other
            }
        }
    }
}

/// Fresh GOP model: uniform positions in `[-1, 1]`, unit scale, zero
/// rotation, colors uniform in `[-0.5, 0.5]`, no motion.
pub fn init_gop<T: Real>(
    config: &TrainConfig,
    frame_range: (usize, usize),
    width: usize,
    height: usize,
) -> Result<GopModel<T>> {
    config.validate()?;
    if frame_range.1 < frame_range.0 {
        return Err(Error::InvalidParameter(format!(
            "empty frame range {frame_range:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let gaussians = (0..config.num_gaussians)
        .map(|_| {
            let mu = [
                T::c(rng.random_range(-1.0..1.0)),
                T::c(rng.random_range(-1.0..1.0)),
            ];
            let color = [
                T::c(rng.random_range(-0.5..0.5)),
                T::c(rng.random_range(-0.5..0.5)),
                T::c(rng.random_range(-0.5..0.5)),
            ];
            Gaussian2D {
                mu,
                color,
                ..Default::default()
            }
        })
        .collect();
    let frames = frame_range.1 - frame_range.0 + 1;
    Ok(GopModel {
        gaussians,
        triplane: TriPlane::for_gop(width, height, frames),
        frame_range,
        mode: config.mode,
    })
}

/// Mean squared error over all values and its gradient `2 (pred - gt) / n`.
pub fn l2_loss<T: Real>(pred: &Frame<T>, gt: &Frame<T>) -> Result<(f64, Frame<T>)> {
    pred.check_shape(gt)?;
    let n = pred.data().len().max(1) as f64;
    let mut loss = 0.0;
    let scale = T::c(2.0 / n);
    let grad: Vec<T> = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let d = p - g;
            loss += d.as_f64() * d.as_f64();
            d * scale
        })
        .collect();
    Ok((
        loss / n,
        Frame::from_data(pred.width(), pred.height(), grad)?,
    ))
}

/// A training target: a frame and its (possibly fractional) source position.
#[derive(Clone, Copy, Debug)]
pub struct TrainSample<'a, T = f32> {
    pub position: f64,
    pub frame: &'a Frame<T>,
}

impl<'a, T> TrainSample<'a, T> {
    pub fn new(position: impl Into<f64>, frame: &'a Frame<T>) -> Self {
        Self {
            position: position.into(),
            frame,
        }
    }
}

/// Loss against one frame and its gradient with respect to every model
/// parameter (render, deformation field and canonical attributes).
pub fn loss_and_gradient<T: Real>(
    gop: &GopModel<T>,
    sample: &TrainSample<'_, T>,
    opts: &RenderOptions,
) -> Result<(f64, GopGradient<T>)> {
    let t = gop.time_of(sample.position);
    let deformed = deform(gop, t);
    let target = sample.frame;
    let (pred, _) = render_with(&deformed, target.width(), target.height(), opts)?;
    let (loss, d_frame) = l2_loss(&pred, target)?;
    let d_deformed = render_backward(&deformed, &d_frame, opts)?;
    Ok((loss, deform_backward(gop, t, &d_deformed)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T = f32> {
    pub model: GopModel<T>,
    pub history: Vec<LossRecord>,
    /// Optimizer state after the last step, for resuming.
    pub optimizer: Adam<T>,
}

impl<T> TrainOutcome<T> {
    /// Mean loss over the last `window` records.
    pub fn smoothed_final_loss(&self, window: usize) -> Option<f64> {
        let tail = &self.history[self.history.len().saturating_sub(window)..];
        (!tail.is_empty()).then(|| tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64)
    }
}

/// Runs `config.iterations` Adam steps, one frame per step in the order set
/// by `config.sampling`. Positions use `lr_position`; every other parameter
/// uses `lr_other`.
pub fn train_gop<T: Real>(
    gop: GopModel<T>,
    samples: &[TrainSample<'_, T>],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    optimize(gop, None, samples, config, config.iterations, None)
}

/// Continues training with min-max quantize-dequantize applied to every
/// attribute before each forward pass. Gradients pass straight through the
/// rounding onto the float parameters.
pub fn qat_finetune<T: Real>(
    gop: GopModel<T>,
    samples: &[TrainSample<'_, T>],
    config: &TrainConfig,
    plan: &BitPlan,
) -> Result<TrainOutcome<T>> {
    plan.validate()?;
    optimize(
        gop,
        None,
        samples,
        config,
        config.qat_iterations,
        Some(plan),
    )
}

/// [`qat_finetune`] resuming the optimizer state of an earlier run instead of
/// starting from zero moments, so the first steps do not kick every
/// parameter by a full learning rate.
pub fn qat_continue<T: Real>(
    trained: TrainOutcome<T>,
    samples: &[TrainSample<'_, T>],
    config: &TrainConfig,
    plan: &BitPlan,
) -> Result<TrainOutcome<T>> {
    plan.validate()?;
    optimize(
        trained.model,
        Some(trained.optimizer),
        samples,
        config,
        config.qat_iterations,
        Some(plan),
    )
}

fn optimize<T: Real>(
    mut gop: GopModel<T>,
    optimizer: Option<Adam<T>>,
    samples: &[TrainSample<'_, T>],
    config: &TrainConfig,
    iterations: usize,
    plan: Option<&BitPlan>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if iterations > 0 && samples.is_empty() {
        return Err(Error::InvalidParameter("no training frames".into()));
    }
    let mut history = Vec::with_capacity(iterations);
    let mut adam = match optimizer {
        Some(a) if a.len() == gop.param_count() => a,
        Some(_) => {
            return Err(Error::InvalidParameter(
                "optimizer state does not match the model".into(),
            ))
        }
        None => Adam::new(gop.param_count(), config.adam),
    };
    let lr = config.learning_rate(gop.gaussians.len() * PARAMS_PER_GAUSSIAN);
    let mut params = gop.to_params();
    let mut order = FrameOrder::new(samples.len(), config.sampling, config.seed);
    for iteration in 0..iterations {
        let sample = &samples[order.next()];
        let (loss, grad) = match plan {
            None => loss_and_gradient(&gop, sample, &config.render)?,
            Some(plan) => loss_and_gradient(&fake_quantize(&gop, plan)?, sample, &config.render)?,
        };
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration, loss });
        }
        history.push(LossRecord {
            iteration,
            loss,
            psnr: mse_to_psnr(loss),
        });
        let flat = grad.to_flat();
        if flat.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { iteration, loss });
        }
        adam.step(&mut params, &flat, &lr);
        gop.set_params(&params);
    }
    Ok(TrainOutcome {
        model: gop,
        history,
        optimizer: adam,
    })
}

struct FrameOrder {
    sampling: FrameSampling,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl FrameOrder {
    fn new(len: usize, sampling: FrameSampling, seed: u64) -> Self {
        Self {
            sampling,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f4a3),
            order: (0..len).collect(),
            cursor: len,
        }
    }

    fn next(&mut self) -> usize {
        if self.cursor == self.order.len() {
            if self.sampling == FrameSampling::Shuffled {
                self.order.shuffle(&mut self.rng);
            }
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

pub(crate) fn mse_to_psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        crate::video::PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(crate::video::PSNR_CAP)
    }
}

/// Renders `gop` at every sample and returns the mean PSNR against the targets.
pub fn evaluate<T: Real>(
    gop: &GopModel<T>,
    samples: &[TrainSample<'_, T>],
    opts: &RenderOptions,
) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let deformed = deform(gop, gop.time_of(s.position));
        let (frame, _) = render_with(&deformed, s.frame.width(), s.frame.height(), opts)?;
        total += psnr(&frame.clamped(), s.frame)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Writes `iteration,loss,psnr` rows.
pub fn write_history_csv(history: &[LossRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "iteration,loss,psnr")?;
    for r in history {
        writeln!(out, "{},{:.9e},{:.4}", r.iteration, r.loss, r.psnr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::deform;

    fn config(n: usize, iterations: usize) -> TrainConfig {
        TrainConfig {
            num_gaussians: n,
            iterations,
            seed: 42,
            ..Default::default()
        }
    }

    #[test]
    fn init_has_unit_scale_and_identity_field() {
        for seed in [0, 1, 99] {
            let cfg = TrainConfig {
                seed,
                ..config(50, 1)
            };
            let gop: GopModel<f32> = init_gop(&cfg, (0, 7), 32, 24).unwrap();
            for g in &gop.gaussians {
                assert_eq!(g.scale(), [1.0, 1.0]);
                assert_eq!(g.rotation(), 0.0);
                assert!(g.mu.iter().all(|m| (-1.0..1.0).contains(m)));
                assert!(g.color.iter().all(|c| (-0.5..0.5).contains(c)));
            }
            for t in [0.0f32, 0.4, 1.0] {
                for (d, g) in deform(&gop, t).iter().zip(&gop.gaussians) {
                    assert_eq!(*d, g.activated());
                }
            }
            assert_eq!(gop.triplane.resolution(), (32, 16, 4));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = config(64, 1);
        let a: GopModel<f32> = init_gop(&cfg, (0, 3), 16, 16).unwrap();
        let b: GopModel<f32> = init_gop(&cfg, (0, 3), 16, 16).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn l2_loss_cases() {
        let a = Frame::from_fn(4, 3, |x, y| [x as f64 * 0.1, y as f64 * 0.2, 0.5]);
        let (loss, grad) = l2_loss(&a, &a).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));

        let b = Frame::from_data(4, 3, a.data().iter().map(|v| v + 0.1).collect()).unwrap();
        let (loss, _) = l2_loss(&b, &a).unwrap();
        assert!((loss - 0.01).abs() < 1e-12);

        assert!(l2_loss(&a, &Frame::zeros(3, 4)).is_err());
    }

    #[test]
    fn l2_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pred = Frame::from_fn(5, 4, |_, _| {
            [
                rng.random::<f64>(),
                rng.random::<f64>(),
                rng.random::<f64>(),
            ]
        });
        let gt = Frame::from_fn(5, 4, |_, _| {
            [
                rng.random::<f64>(),
                rng.random::<f64>(),
                rng.random::<f64>(),
            ]
        });
        let (_, grad) = l2_loss(&pred, &gt).unwrap();
        let h = 1e-6;
        for i in 0..pred.data().len() {
            let mut p = pred.clone();
            p.data_mut()[i] += h;
            let mut m = pred.clone();
            m.data_mut()[i] -= h;
            let numeric = (l2_loss(&p, &gt).unwrap().0 - l2_loss(&m, &gt).unwrap().0) / (2.0 * h);
            assert!((numeric - grad.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_iterations_returns_init() {
        let cfg = config(16, 0);
        let gop: GopModel<f32> = init_gop(&cfg, (0, 0), 8, 8).unwrap();
        let frame = Frame::zeros(8, 8);
        let out = train_gop(gop.clone(), &[TrainSample::new(0.0, &frame)], &cfg).unwrap();
        assert_eq!(out.model, gop);
        assert!(out.history.is_empty());
    }

    #[test]
    fn uniform_frame_is_fit_to_high_psnr() {
        let cfg = TrainConfig {
            iterations: 500,
            ..config(64, 500)
        };
        let (w, h) = (32, 32);
        let target = Frame::from_fn(w, h, |_, _| [0.4f32, 0.6, 0.2]);
        let gop = init_gop(&cfg, (0, 0), w, h).unwrap();
        let samples = [TrainSample::new(0.0, &target)];
        let out = train_gop(gop, &samples, &cfg).unwrap();
        let quality = evaluate(&out.model, &samples, &cfg.render).unwrap();
        assert!(quality >= 40.0, "psnr {quality}");
        let first = out.history[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        assert!(out.smoothed_final_loss(10).unwrap() < first);
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainConfig {
            lr_other: 1e30,
            lr_position: 1e30,
            ..config(8, 50)
        };
        let target = Frame::from_fn(8, 8, |_, _| [1.0f32, 1.0, 1.0]);
        let gop = init_gop(&cfg, (0, 0), 8, 8).unwrap();
        let err = train_gop(gop, &[TrainSample::new(0.0, &target)], &cfg).unwrap_err();
        assert!(err.is_divergence(), "{err}");
    }

    #[test]
    fn lossless_plan_qat_equals_plain_training() {
        let cfg = TrainConfig {
            qat_iterations: 20,
            ..config(24, 20)
        };
        let target = Frame::from_fn(12, 12, |x, y| [x as f32 / 12.0, y as f32 / 12.0, 0.3]);
        let gop = init_gop(&cfg, (0, 0), 12, 12).unwrap();
        let samples = [TrainSample::new(0.0, &target)];
        let plain = train_gop(gop.clone(), &samples, &cfg).unwrap();
        let qat = qat_finetune(gop, &samples, &cfg, &BitPlan::lossless()).unwrap();
        assert_eq!(plain.model, qat.model);
    }

    #[test]
    fn history_csv_shape() {
        let rows = [LossRecord {
            iteration: 0,
            loss: 0.01,
            psnr: 20.0,
        }];
        let mut buf = Vec::new();
        write_history_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,loss,psnr\n0,"));
        assert!(text.trim_end().ends_with(",20.0000"));
    }
}
