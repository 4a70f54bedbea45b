//! Cascaded training: successive phases of growing patch size and shrinking
//! batch size, each warm-started from the previous phase's weights, with a
//! cosine learning-rate anneal restarting per phase.

use serde::{Deserialize, Serialize};

use crate::corrupt::CorruptionSpec;
use crate::dataio::{self, ImagePair};
use crate::denoiser::Denoiser;
use crate::diffusion;
use crate::rng::{sub_rng, Rng};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};
use rand::Rng as _;

/// One cascade phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseConfig {
    /// Square crop size fed to the network; must be divisible by 8.
    pub patch_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
}

/// Full training recipe.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Cascade phases in execution order: strictly increasing patch size,
    /// non-increasing batch size.
    pub phases: Vec<PhaseConfig>,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Adaptive-moment optimizer constants.
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Corruption applied to every conditioning patch, freshly sampled per
    /// batch element.
    pub corruption: CorruptionSpec,
    /// Random horizontal flip of each crop pair. Vertical flips are never
    /// applied (they would break the sky-above-ground prior of the data).
    pub horizontal_flip: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Workstation-scale cascade.
    pub fn desk(corruption: CorruptionSpec, seed: u64) -> Self {
        TrainConfig {
            phases: vec![
                PhaseConfig { patch_size: 32, batch_size: 64, epochs: 100 },
                PhaseConfig { patch_size: 64, batch_size: 16, epochs: 50 },
                PhaseConfig { patch_size: 128, batch_size: 4, epochs: 10 },
            ],
            lr_start: 1e-4,
            lr_end: 1e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            corruption,
            horizontal_flip: true,
            seed,
        }
    }

    /// Full-scale cascade for 640-pixel source imagery.
    pub fn paper_scale(corruption: CorruptionSpec, seed: u64) -> Self {
        TrainConfig {
            phases: vec![
                PhaseConfig { patch_size: 160, batch_size: 64, epochs: 10_000 },
                PhaseConfig { patch_size: 320, batch_size: 16, epochs: 5_000 },
                PhaseConfig { patch_size: 640, batch_size: 4, epochs: 1_000 },
            ],
            ..TrainConfig::desk(corruption, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::InvalidConfig("at least one training phase required".into()));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.patch_size == 0 || p.patch_size % 8 != 0 {
                return Err(Error::InvalidConfig(format!(
                    "phase {} patch size {} must be a positive multiple of 8",
                    i + 1,
                    p.patch_size
                )));
            }
            if p.batch_size == 0 || p.epochs == 0 {
                return Err(Error::InvalidConfig(format!(
                    "phase {} must have positive batch size and epochs",
                    i + 1
                )));
            }
        }
        for w in self.phases.windows(2) {
            if w[1].patch_size <= w[0].patch_size {
                return Err(Error::InvalidConfig(
                    "phase patch sizes must be strictly increasing".into(),
                ));
            }
            if w[1].batch_size > w[0].batch_size {
                return Err(Error::InvalidConfig(
                    "phase batch sizes must be non-increasing".into(),
                ));
            }
        }
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0) {
            return Err(Error::InvalidConfig("require lr_start > lr_end > 0".into()));
        }
        self.corruption.validate()
    }
}

/// Cosine learning-rate anneal:
/// `lr_end + 0.5 (lr_start - lr_end) (1 + cos(pi step / total_steps))`.
pub fn lr_at(step: usize, total_steps: usize, lr_start: f64, lr_end: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidArg("total_steps must be at least 1".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidArg(format!("step {step} exceeds total_steps {total_steps}")));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Adaptive-moment optimizer with bias correction and no weight decay.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    /// First/second moment estimates, one flat buffer per parameter array
    /// in visitor order.
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    steps_taken: u64,
}

impl Adam {
    pub fn new(net: &Denoiser<f32>, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let mut m = Vec::new();
        net.visit_arrays(&mut |_, _, a| m.push(vec![0.0f32; a.len()]));
        let v = m.clone();
        Adam { beta1, beta2, epsilon, m, v, steps_taken: 0 }
    }

    /// One update step at learning rate `lr`. `grads` must mirror `params`.
    pub fn step(&mut self, params: &mut Denoiser<f32>, grads: &Denoiser<f32>, lr: f64) {
        self.steps_taken += 1;
        let correction1 = 1.0 - self.beta1.powi(self.steps_taken as i32);
        let correction2 = 1.0 - self.beta2.powi(self.steps_taken as i32);
        // Copy the gradient arrays out so the mutable walk over `params`
        // below can index them by position.
        let mut collected: Vec<Vec<f32>> = Vec::with_capacity(self.m.len());
        grads.visit_arrays(&mut |_, _, a| collected.push(a.to_vec()));

        let mut idx = 0usize;
        params.visit_arrays_mut(&mut |_, _, a| {
            let g = &collected[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            debug_assert_eq!(a.len(), g.len());
            for j in 0..a.len() {
                let gj = g[j] as f64;
                let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let m_hat = mj / correction1;
                let v_hat = vj / correction2;
                a[j] -= (lr * m_hat / (v_hat.sqrt() + self.epsilon)) as f32;
            }
            idx += 1;
        });
    }
}

/// One optimizer step's bookkeeping, serialized to the loss CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    /// 1-based phase index.
    pub phase: usize,
    /// 1-based step index within the phase.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Renders loss records as CSV with a `step,phase,lr,loss` header, where
/// `step` counts optimizer steps across the whole cascade.
pub fn loss_history_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("step,phase,lr,loss\n");
    for (i, r) in records.iter().enumerate() {
        out.push_str(&format!("{},{},{:.9e},{:.9e}\n", i + 1, r.phase, r.lr, r.loss));
    }
    out
}

/// Runs one cascade phase in place, returning its per-step loss records.
///
/// Every optimizer step draws `batch_size` elements: a uniformly random
/// pair, a shared random crop of the pair, an optional horizontal flip, a
/// fresh corruption of the conditioning crop, a uniform step index, and a
/// fresh noise draw. Gradients are averaged over the batch.
pub fn train_phase(
    net: &mut Denoiser<f32>,
    pairs: &[ImagePair],
    phase_index: usize,
    phase: &PhaseConfig,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Vec<LossRecord>> {
    if pairs.is_empty() {
        return Err(Error::InvalidArg("training dataset is empty".into()));
    }
    if phase.patch_size == 0 || phase.patch_size % 8 != 0 {
        return Err(Error::InvalidConfig(format!(
            "patch size {} must be a positive multiple of 8",
            phase.patch_size
        )));
    }
    for p in pairs {
        let (h, w, _) = p.input.shape();
        if phase.patch_size > h || phase.patch_size > w {
            return Err(Error::InvalidArg(format!(
                "patch size {} exceeds image '{}' ({h}x{w})",
                phase.patch_size, p.id
            )));
        }
    }
    config.corruption.validate()?;

    let steps_per_epoch = (pairs.len() / phase.batch_size).max(1);
    let total_steps = phase.epochs * steps_per_epoch;
    let mut optimizer = Adam::new(net, config.adam_beta1, config.adam_beta2, config.adam_epsilon);
    let mut records = Vec::with_capacity(total_steps);
    let mut grads = net.zeroed();

    for step in 0..total_steps {
        let lr = lr_at(step, total_steps, config.lr_start, config.lr_end)?;
        grads.visit_arrays_mut(&mut |_, _, a| a.iter_mut().for_each(|v| *v = 0.0));
        let mut batch_loss = 0.0f64;
        for _ in 0..phase.batch_size {
            let which = rng.random_range(0..pairs.len());
            let pair = &pairs[which];
            let (mut inp, mut refr) =
                dataio::random_crop_pair(&pair.input, &pair.reference, phase.patch_size, rng)?;
            if config.horizontal_flip && rng.random::<f64>() < 0.5 {
                inp = dataio::flip_horizontal(&inp);
                refr = dataio::flip_horizontal(&refr);
            }
            let corrupted = crate::corrupt::corrupt(&inp, &config.corruption, rng)?;
            let cond = dataio::to_model_range(&corrupted)?;
            let y0 = dataio::to_model_range(&refr)?;
            let t = rng.random_range(1..=schedule.t_max());
            let eps = diffusion::noise_like(&y0, rng);
            batch_loss +=
                diffusion::loss_and_param_grads(net, &y0, &cond, t, &eps, schedule, &mut grads)?;
        }
        let scale = 1.0 / phase.batch_size as f32;
        grads.visit_arrays_mut(&mut |_, _, a| a.iter_mut().for_each(|v| *v *= scale));
        optimizer.step(net, &grads, lr);
        records.push(LossRecord {
            phase: phase_index,
            step: step + 1,
            lr,
            loss: batch_loss / phase.batch_size as f64,
        });
    }
    Ok(records)
}

/// Runs the cascade from `phases_done` onward (0 = from scratch), mutating
/// `net` in place. `on_phase_complete(phase_index, net, records_so_far)` is
/// called after each phase, e.g. to write a checkpoint.
///
/// Each phase draws from an independent stream derived from
/// `(config.seed, "phase-N")`, so resuming at a phase boundary reproduces an
/// uninterrupted run exactly.
pub fn train_cascade(
    net: &mut Denoiser<f32>,
    pairs: &[ImagePair],
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    phases_done: usize,
    mut on_phase_complete: impl FnMut(usize, &Denoiser<f32>, &[LossRecord]) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    config.validate()?;
    if phases_done > config.phases.len() {
        return Err(Error::InvalidArg(format!(
            "cannot resume after phase {phases_done}; config has {} phases",
            config.phases.len()
        )));
    }
    let mut records = Vec::new();
    for (i, phase) in config.phases.iter().enumerate().skip(phases_done) {
        let label = format!("phase-{}", i + 1);
        let mut rng = sub_rng(config.seed, &label);
        let phase_records = train_phase(net, pairs, i + 1, phase, config, schedule, &mut rng)?;
        records.extend(phase_records);
        on_phase_complete(i + 1, net, &records)?;
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::schedule::ScheduleConfig;
    use crate::tensor::{ImageTensor, Range};

    fn toy_pairs(n: usize, size: usize, seed: u64) -> Vec<ImagePair> {
        let mut rng = sub_rng(seed, "toy-pairs");
        (0..n)
            .map(|i| {
                let mk = |rng: &mut Rng| {
                    let data = (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect();
                    ImageTensor::from_data(size, size, 3, Range::Unit, data).unwrap()
                };
                ImagePair { id: format!("toy-{i}"), input: mk(&mut rng), reference: mk(&mut rng) }
            })
            .collect()
    }

    fn tiny_config(phases: Vec<PhaseConfig>, seed: u64) -> TrainConfig {
        TrainConfig {
            phases,
            lr_start: 3e-3,
            lr_end: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            corruption: CorruptionSpec::none(),
            horizontal_flip: true,
            seed,
        }
    }

    #[test]
    fn lr_schedule_hits_endpoints_and_midpoint() {
        assert_eq!(lr_at(0, 100, 1e-4, 1e-6).unwrap(), 1e-4);
        let end = lr_at(100, 100, 1e-4, 1e-6).unwrap();
        assert!((end - 1e-6).abs() < 1e-18);
        let mid = lr_at(50, 100, 1e-4, 1e-6).unwrap();
        assert!((mid - 5.05e-5).abs() < 1e-12, "{mid}");
    }

    #[test]
    fn lr_schedule_is_monotone_and_bounded() {
        let mut prev = f64::INFINITY;
        for step in 0..=200 {
            let lr = lr_at(step, 200, 1e-4, 1e-6).unwrap();
            assert!(lr <= prev);
            assert!((1e-6..=1e-4).contains(&lr));
            prev = lr;
        }
    }

    #[test]
    fn lr_schedule_rejects_out_of_range_steps() {
        assert!(lr_at(101, 100, 1e-4, 1e-6).is_err());
        assert!(lr_at(0, 0, 1e-4, 1e-6).is_err());
    }

    #[test]
    fn adam_zero_gradient_and_zero_lr_leave_parameters_unchanged() {
        let cfg = DenoiserConfig::minimal();
        let mut net: Denoiser<f32> = Denoiser::init(&cfg, &mut sub_rng(90, "adam")).unwrap();
        let before: Vec<f32> = {
            let mut v = Vec::new();
            net.visit_arrays(&mut |_, _, a| v.extend_from_slice(a));
            v
        };

        let zero_grads = net.zeroed();
        let mut opt = Adam::new(&net, 0.9, 0.999, 1e-8);
        opt.step(&mut net, &zero_grads, 1e-3);
        let mut after = Vec::new();
        net.visit_arrays(&mut |_, _, a| after.extend_from_slice(a));
        assert_eq!(before, after, "zero gradient must be a no-op");

        // Nonzero gradients at zero learning rate: also a bitwise no-op.
        let mut fake_grads = net.zeroed();
        fake_grads.visit_arrays_mut(&mut |_, _, a| a.iter_mut().for_each(|v| *v = 0.25));
        let mut opt = Adam::new(&net, 0.9, 0.999, 1e-8);
        opt.step(&mut net, &fake_grads, 0.0);
        let mut after_zero_lr = Vec::new();
        net.visit_arrays(&mut |_, _, a| after_zero_lr.extend_from_slice(a));
        assert_eq!(before, after_zero_lr, "zero learning rate must be a no-op");
    }

    #[test]
    fn config_validation_enforces_monotone_phases() {
        let ok = tiny_config(
            vec![
                PhaseConfig { patch_size: 8, batch_size: 4, epochs: 1 },
                PhaseConfig { patch_size: 16, batch_size: 2, epochs: 1 },
            ],
            1,
        );
        assert!(ok.validate().is_ok());

        let mut bad_patch = ok.clone();
        bad_patch.phases[1].patch_size = 8;
        assert!(bad_patch.validate().is_err(), "non-increasing patch must be rejected");

        let mut bad_batch = ok.clone();
        bad_batch.phases[1].batch_size = 8;
        assert!(bad_batch.validate().is_err(), "increasing batch must be rejected");

        let mut bad_align = ok.clone();
        bad_align.phases[0].patch_size = 12;
        assert!(bad_align.validate().is_err(), "patch must be a multiple of 8");

        let mut bad_lr = ok;
        bad_lr.lr_end = bad_lr.lr_start;
        assert!(bad_lr.validate().is_err(), "lr_start must exceed lr_end");
    }

    #[test]
    fn train_phase_is_deterministic_given_seed() {
        let schedule = ScheduleConfig { t_max: 8, beta_start: 1e-3, beta_end: 0.3 }.build().unwrap();
        let pairs = toy_pairs(3, 8, 91);
        let config = tiny_config(vec![PhaseConfig { patch_size: 8, batch_size: 2, epochs: 4 }], 2);
        let run = || {
            let mut net: Denoiser<f32> =
                Denoiser::init(&DenoiserConfig::minimal(), &mut sub_rng(92, "net")).unwrap();
            let mut rng = sub_rng(92, "phase");
            train_phase(&mut net, &pairs, 1, &config.phases[0], &config, &schedule, &mut rng)
                .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn train_phase_rejects_empty_dataset_and_oversized_patch() {
        let schedule = ScheduleConfig { t_max: 4, beta_start: 1e-3, beta_end: 0.3 }.build().unwrap();
        let config = tiny_config(vec![PhaseConfig { patch_size: 8, batch_size: 1, epochs: 1 }], 3);
        let mut net: Denoiser<f32> =
            Denoiser::init(&DenoiserConfig::minimal(), &mut sub_rng(93, "net")).unwrap();
        let mut rng = sub_rng(93, "r");
        let err = train_phase(&mut net, &[], 1, &config.phases[0], &config, &schedule, &mut rng);
        assert!(err.is_err());

        let pairs = toy_pairs(2, 8, 93);
        let phase = PhaseConfig { patch_size: 16, batch_size: 1, epochs: 1 };
        let err = train_phase(&mut net, &pairs, 1, &phase, &config, &schedule, &mut rng);
        assert!(err.is_err(), "patch larger than images must be rejected");
    }

    #[test]
    fn loss_descends_on_toy_set() {
        // 4 pairs at 16x16, 200 steps: late losses must beat early losses.
        let schedule =
            ScheduleConfig { t_max: 10, beta_start: 1e-3, beta_end: 0.3 }.build().unwrap();
        let pairs = toy_pairs(4, 16, 94);
        let config = tiny_config(vec![PhaseConfig { patch_size: 16, batch_size: 2, epochs: 100 }], 4);
        let mut net: Denoiser<f32> =
            Denoiser::init(&DenoiserConfig::minimal(), &mut sub_rng(95, "net")).unwrap();
        let mut rng = sub_rng(95, "phase");
        let records =
            train_phase(&mut net, &pairs, 1, &config.phases[0], &config, &schedule, &mut rng)
                .unwrap();
        assert_eq!(records.len(), 200);
        let first: f64 = records[..20].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        let last: f64 = records[180..].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        assert!(
            last < first,
            "training should reduce the loss: first-20 mean {first}, last-20 mean {last}"
        );
    }

    #[test]
    fn cascade_final_loss_vs_single_phase_is_reported() {
        // Informative, non-gating: compare the cascade's final loss with a
        // phase-1-only run of the same step budget. The comparison is
        // stochastic at this scale, so the assertion only requires finite
        // losses; the numbers are printed for inspection.
        let schedule =
            ScheduleConfig { t_max: 10, beta_start: 1e-3, beta_end: 0.3 }.build().unwrap();
        let pairs = toy_pairs(4, 16, 98);
        let tail_mean = |records: &[LossRecord]| {
            let tail = &records[records.len().saturating_sub(10)..];
            tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64
        };

        let cascade_cfg = tiny_config(
            vec![
                PhaseConfig { patch_size: 8, batch_size: 2, epochs: 50 },
                PhaseConfig { patch_size: 16, batch_size: 2, epochs: 50 },
            ],
            6,
        );
        let mut net: Denoiser<f32> =
            Denoiser::init(&DenoiserConfig::minimal(), &mut sub_rng(99, "net")).unwrap();
        let cascade_records =
            train_cascade(&mut net, &pairs, &cascade_cfg, &schedule, 0, |_, _, _| Ok(())).unwrap();

        let single_cfg = tiny_config(
            vec![PhaseConfig { patch_size: 8, batch_size: 2, epochs: 100 }],
            6,
        );
        let mut net1: Denoiser<f32> =
            Denoiser::init(&DenoiserConfig::minimal(), &mut sub_rng(99, "net")).unwrap();
        let single_records =
            train_cascade(&mut net1, &pairs, &single_cfg, &schedule, 0, |_, _, _| Ok(())).unwrap();

        let (c, s) = (tail_mean(&cascade_records), tail_mean(&single_records));
        println!("cascade tail loss {c:.6} vs phase-1-only tail loss {s:.6}");
        assert!(c.is_finite() && s.is_finite());
    }

    #[test]
    fn cascade_runs_phases_and_resumes_bit_identically() {
        let schedule = ScheduleConfig { t_max: 6, beta_start: 1e-3, beta_end: 0.3 }.build().unwrap();
        let pairs = toy_pairs(3, 16, 96);
        let config = tiny_config(
            vec![
                PhaseConfig { patch_size: 8, batch_size: 2, epochs: 2 },
                PhaseConfig { patch_size: 16, batch_size: 1, epochs: 2 },
            ],
            5,
        );
        let fresh =
            || Denoiser::<f32>::init(&DenoiserConfig::minimal(), &mut sub_rng(97, "net")).unwrap();
        let params_of = |net: &Denoiser<f32>| {
            let mut v = Vec::new();
            net.visit_arrays(&mut |_, _, a| v.extend_from_slice(a));
            v
        };

        // Uninterrupted run; record the phase-boundary callback trail.
        let mut completed = Vec::new();
        let mut full = fresh();
        let recs = train_cascade(&mut full, &pairs, &config, &schedule, 0, |i, _, rs| {
            completed.push((i, rs.len()));
            Ok(())
        })
        .unwrap();
        // Phase 1: steps_per_epoch = max(1, 3 pairs / batch 2) = 1, so 2 steps
        // over 2 epochs; phase 2 at batch 1 runs 3 * 2 = 6 more.
        assert_eq!(completed, vec![(1, 2), (2, 8)]);
        assert_eq!(recs.len(), 8);

        // Interrupted run: phase 1 only, then resume from the boundary.
        let mut resumed = fresh();
        let mut snapshot = None;
        train_cascade(&mut resumed, &pairs, &config, &schedule, 0, |i, net, _| {
            if i == 1 {
                snapshot = Some(net.clone());
            }
            Err(Error::InvalidArg("stop after phase 1".into()))
        })
        .ok();
        let mut resumed = snapshot.expect("phase 1 must have completed");
        train_cascade(&mut resumed, &pairs, &config, &schedule, 1, |_, _, _| Ok(())).unwrap();

        assert_eq!(params_of(&full), params_of(&resumed), "resume must match the full run");
    }
}
