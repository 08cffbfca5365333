//! Training loops: paired L2 regression and the unpaired adversarial
//! procedure (critic with gradient penalty, then a velocity update).

use crate::checkpoint::{save_velocity_net, CheckpointError};
use crate::data::{batches, Batch, DataError, Dataset, DatasetMode};
use crate::nn::{Adam, BoundCritic, Critic, VelocityNet};
use crate::ode::{integrate_on, Method, OdeError};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::warp::{jd_penalty_on, og_penalty_on, warp_image_on, ImageFrame};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}, first produced by op #{index} ({op})")]
    NonFinite {
        step: usize,
        index: usize,
        op: String,
    },
    #[error("dataset mode {dataset:?} does not match config mode {config:?}")]
    ModeMismatch {
        dataset: DatasetMode,
        config: TrainMode,
    },
    #[error("bad config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    PairedL2,
    UnpairedGan,
}

/// Every knob the training procedure leaves open.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Critic updates per velocity update (adversarial mode).
    pub n_critic: usize,
    /// Gradient-penalty coefficient.
    pub gp_lambda: f64,
    pub w_jd: f64,
    pub w_og: f64,
    pub batch_size: usize,
    /// Solver steps per unit time during training solves.
    pub ode_steps: usize,
    pub ode_method: Method,
    pub lr_v: f64,
    pub lr_d: f64,
    pub betas_v: (f64, f64),
    pub betas_d: (f64, f64),
    pub max_steps: usize,
    pub seed: u64,
    /// Checkpoint every this many steps (0 = only the final one).
    pub checkpoint_every: usize,
    /// Stop when the primary loss's 200-step moving average improves
    /// by less than 1e-5.
    pub early_stop: bool,
    /// Velocity U-Net architecture.
    pub net_depth: usize,
    pub net_base: usize,
}

impl TrainConfig {
    pub fn paired_l2() -> Self {
        TrainConfig {
            mode: TrainMode::PairedL2,
            n_critic: 5,
            gp_lambda: 10.0,
            w_jd: 1.0,
            w_og: 1.0,
            batch_size: 8,
            ode_steps: 8,
            ode_method: Method::Rk4,
            lr_v: 1e-3,
            lr_d: 1e-4,
            betas_v: (0.9, 0.999),
            betas_d: (0.0, 0.9),
            max_steps: 1000,
            seed: 0,
            checkpoint_every: 0,
            early_stop: false,
            net_depth: VelocityNet::DEFAULT_DEPTH,
            net_base: VelocityNet::DEFAULT_BASE,
        }
    }

    pub fn unpaired_gan() -> Self {
        TrainConfig {
            mode: TrainMode::UnpairedGan,
            lr_v: 1e-4,
            betas_v: (0.0, 0.9),
            ..Self::paired_l2()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_critic < 1 {
            return Err(TrainError::Config("n_critic must be >= 1".into()));
        }
        if self.gp_lambda < 0.0 {
            return Err(TrainError::Config("gp_lambda must be >= 0".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.ode_steps < 1 {
            return Err(TrainError::Config("ode_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-step scalar diagnostics; `losses` keys depend on the mode.
#[derive(Clone, Debug, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub losses: BTreeMap<String, f64>,
    pub ms: f64,
}

impl StepReport {
    pub fn loss(&self, key: &str) -> Option<f64> {
        self.losses.get(key).copied()
    }
}

/// Mutable training state: the networks, their optimizers and the RNG
/// used for interpolation draws.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub vnet: VelocityNet,
    pub critic: Option<Critic>,
    adam_v: Adam,
    adam_d: Option<Adam>,
    rng: ChaCha8Rng,
    step: usize,
}

/// Mean squared error between two same-shaped tape values.
fn mse_on(tape: &mut Tape, a: Var, b: Var) -> crate::tensor::Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    tape.mean_all(sq)
}

fn non_finite(step: usize, tape: &Tape) -> TrainError {
    let (index, op) = tape
        .first_non_finite()
        .map(|(i, o)| (i, o.to_string()))
        .unwrap_or((0, "unknown".into()));
    TrainError::NonFinite { step, index, op }
}

impl Trainer {
    /// Build trainer state for images of the given dimensions. The U-Net
    /// depth is lowered if the requested one does not divide the image.
    pub fn new(cfg: TrainConfig, dims: (usize, usize, usize)) -> Result<Self> {
        cfg.validate()?;
        let (h, w, c) = dims;
        let mut depth = cfg.net_depth;
        while depth > 1 && (h % (1 << depth) != 0 || w % (1 << depth) != 0) {
            depth -= 1;
        }
        if h % (1 << depth) != 0 || w % (1 << depth) != 0 {
            return Err(TrainError::Config(format!(
                "image dims {h}x{w} not divisible by 2 for the velocity net"
            )));
        }
        let vnet = VelocityNet::with_arch(c, depth, cfg.net_base, cfg.seed);
        let (critic, adam_d) = if cfg.mode == TrainMode::UnpairedGan {
            (
                Some(Critic::new(c, h, w, cfg.seed.wrapping_add(1))),
                Some(Adam::new(cfg.lr_d, cfg.betas_d.0, cfg.betas_d.1)),
            )
        } else {
            (None, None)
        };
        Ok(Trainer {
            adam_v: Adam::new(cfg.lr_v, cfg.betas_v.0, cfg.betas_v.1),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(7)),
            vnet,
            critic,
            adam_d,
            cfg,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    fn apply_vnet_grads(
        &mut self,
        tape: &mut Tape,
        vars: &[Var],
        grads: &crate::tensor::Grads,
    ) -> Result<()> {
        // unreached parameters have zero gradient by definition
        let gvals: Vec<Option<Tensor>> = vars
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                Some(match grads.get(v) {
                    Some(g) => tape.value(g).clone(),
                    None => Tensor::zeros(
                        self.vnet.params().iter().nth(i).unwrap().value.shape(),
                    ),
                })
            })
            .collect();
        self.adam_v.step(self.vnet.params_mut(), &gvals)?;
        Ok(())
    }

    /// One paired update: solve to t=1, warp, L2 plus penalties, Adam on V.
    pub fn l2_step(&mut self, batch: &[(&ImageFrame, &ImageFrame)]) -> Result<StepReport> {
        let start = Instant::now();
        let x0s: Vec<&ImageFrame> = batch.iter().map(|p| p.0).collect();
        let x1s: Vec<&ImageFrame> = batch.iter().map(|p| p.1).collect();
        let x0_t = ImageFrame::batch_nchw(&x0s)?;
        let x1_t = ImageFrame::batch_nchw(&x1s)?;

        let mut tape = Tape::new();
        let bound = self.vnet.bind(&mut tape, true);
        let x0 = tape.constant(x0_t);
        let x1 = tape.constant(x1_t);
        let phi1 = integrate_on(
            &mut tape,
            &bound,
            x0,
            1.0,
            self.cfg.ode_steps,
            self.cfg.ode_method,
        )?;
        let xhat = warp_image_on(&mut tape, x0, phi1)?;
        let l2 = mse_on(&mut tape, xhat, x1)?;
        let jd = jd_penalty_on(&mut tape, &[phi1])?;
        let og = og_penalty_on(&mut tape, &[phi1])?;
        let jd_w = tape.scale(jd, self.cfg.w_jd);
        let og_w = tape.scale(og, self.cfg.w_og);
        let loss = tape.add(l2, jd_w)?;
        let loss = tape.add(loss, og_w)?;
        if !tape.value(loss).all_finite() {
            return Err(non_finite(self.step, &tape));
        }
        let (l2v, jdv, ogv, lossv) = (
            tape.value(l2).item(),
            tape.value(jd).item(),
            tape.value(og).item(),
            tape.value(loss).item(),
        );
        let grads = tape.backward(loss)?;
        let vars = bound.vars().to_vec();
        self.apply_vnet_grads(&mut tape, &vars, &grads)?;
        self.step += 1;
        let mut losses = BTreeMap::new();
        losses.insert("l2".into(), l2v);
        losses.insert("jd".into(), jdv);
        losses.insert("og".into(), ogv);
        losses.insert("total".into(), lossv);
        Ok(StepReport {
            step: self.step,
            losses,
            ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Generate warped end frames from x0s with no gradient tracking.
    pub fn generate_fakes(&self, x0s: &[&ImageFrame]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.vnet.bind(&mut tape, false);
        let x0 = tape.constant(ImageFrame::batch_nchw(x0s)?);
        let phi1 = integrate_on(
            &mut tape,
            &bound,
            x0,
            1.0,
            self.cfg.ode_steps,
            self.cfg.ode_method,
        )?;
        let xhat = warp_image_on(&mut tape, x0, phi1)?;
        Ok(tape.value(xhat).clone())
    }

    /// One critic update on a real batch and a detached fake batch.
    /// Returns (critic loss, gradient penalty, wasserstein estimate).
    pub fn critic_step(&mut self, real: &Tensor, fake: &Tensor) -> Result<(f64, f64, f64)> {
        if real.shape() != fake.shape() {
            return Err(TrainError::Tensor(TensorError::ShapeMismatch {
                op: "critic_step",
                lhs: real.shape().to_vec(),
                rhs: fake.shape().to_vec(),
            }));
        }
        let critic = self
            .critic
            .as_ref()
            .ok_or_else(|| TrainError::Config("critic_step in paired mode".into()))?;
        let n = real.shape()[0];
        let mut tape = Tape::new();
        let bound = critic.bind(&mut tape, true);
        let real_v = tape.constant(real.clone());
        let fake_v = tape.constant(fake.clone());
        let d_real = bound.forward(&mut tape, real_v)?;
        let d_fake = bound.forward(&mut tape, fake_v)?;
        let mean_real = tape.mean_all(d_real)?;
        let mean_fake = tape.mean_all(d_fake)?;
        let neg_real = tape.neg(mean_real);
        let base = tape.add(neg_real, mean_fake)?;
        let eps: Vec<f64> = (0..n).map(|_| self.rng.random_range(0.0..1.0)).collect();
        let (loss, gp_val) = if self.cfg.gp_lambda > 0.0 {
            let gp = gradient_penalty_on(&mut tape, &bound, real, fake, &eps)?;
            let gp_w = tape.scale(gp, self.cfg.gp_lambda);
            (tape.add(base, gp_w)?, tape.value(gp).item())
        } else {
            (base, 0.0)
        };
        if !tape.value(loss).all_finite() {
            return Err(non_finite(self.step, &tape));
        }
        let loss_val = tape.value(loss).item();
        let wdist = tape.value(mean_real).item() - tape.value(mean_fake).item();
        let grads = tape.backward(loss)?;
        let vars = bound.vars().to_vec();
        let critic = self.critic.as_mut().unwrap();
        let gvals: Vec<Option<Tensor>> = vars
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                Some(match grads.get(v) {
                    Some(g) => tape.value(g).clone(),
                    None => Tensor::zeros(critic.params().iter().nth(i).unwrap().value.shape()),
                })
            })
            .collect();
        self.adam_d.as_mut().unwrap().step(critic.params_mut(), &gvals)?;
        Ok((loss_val, gp_val, wdist))
    }

    /// One velocity update against the frozen critic.
    pub fn generator_step(&mut self, x0s: &[&ImageFrame]) -> Result<StepReport> {
        let start = Instant::now();
        let critic = self
            .critic
            .as_ref()
            .ok_or_else(|| TrainError::Config("generator_step in paired mode".into()))?;
        let mut tape = Tape::new();
        let bound = self.vnet.bind(&mut tape, true);
        let frozen_critic = critic.bind(&mut tape, false);
        let x0 = tape.constant(ImageFrame::batch_nchw(x0s)?);
        let phi1 = integrate_on(
            &mut tape,
            &bound,
            x0,
            1.0,
            self.cfg.ode_steps,
            self.cfg.ode_method,
        )?;
        let xhat = warp_image_on(&mut tape, x0, phi1)?;
        let score = frozen_critic.forward(&mut tape, xhat)?;
        let mean_score = tape.mean_all(score)?;
        let neg = tape.neg(mean_score);
        let jd = jd_penalty_on(&mut tape, &[phi1])?;
        let og = og_penalty_on(&mut tape, &[phi1])?;
        let jd_w = tape.scale(jd, self.cfg.w_jd);
        let og_w = tape.scale(og, self.cfg.w_og);
        let loss = tape.add(neg, jd_w)?;
        let loss = tape.add(loss, og_w)?;
        if !tape.value(loss).all_finite() {
            return Err(non_finite(self.step, &tape));
        }
        let (genv, jdv, ogv) = (
            tape.value(loss).item(),
            tape.value(jd).item(),
            tape.value(og).item(),
        );
        let grads = tape.backward(loss)?;
        let vars = bound.vars().to_vec();
        self.apply_vnet_grads(&mut tape, &vars, &grads)?;
        self.step += 1;
        let mut losses = BTreeMap::new();
        losses.insert("gen_loss".into(), genv);
        losses.insert("jd".into(), jdv);
        losses.insert("og".into(), ogv);
        Ok(StepReport {
            step: self.step,
            losses,
            ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// One full adversarial round: n_critic critic updates, then one
    /// velocity update.
    pub fn gan_step(
        &mut self,
        critic_batches: &[(Vec<&ImageFrame>, Vec<&ImageFrame>)],
        gen_x0s: &[&ImageFrame],
    ) -> Result<StepReport> {
        let start = Instant::now();
        assert_eq!(critic_batches.len(), self.cfg.n_critic);
        let mut c_loss_sum = 0.0;
        let mut gp_sum = 0.0;
        let mut wdist_last = 0.0;
        for (x0s, x1s) in critic_batches {
            let fake = self.generate_fakes(x0s)?;
            let real = ImageFrame::batch_nchw(x1s)?;
            let (c_loss, gp, wdist) = self.critic_step(&real, &fake)?;
            c_loss_sum += c_loss;
            gp_sum += gp;
            wdist_last = wdist;
        }
        let mut report = self.generator_step(gen_x0s)?;
        let n = self.cfg.n_critic as f64;
        report.losses.insert("critic_loss".into(), c_loss_sum / n);
        report.losses.insert("gp".into(), gp_sum / n);
        report.losses.insert("wdist".into(), wdist_last);
        report.ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(report)
    }
}

/// Gradient penalty on interpolates between real and fake batches:
/// mean over examples of (||grad_x D(x_eps)||_2 - 1)^2. Differentiating
/// the result reaches the critic parameters through the inner gradient.
pub fn gradient_penalty_on(
    tape: &mut Tape,
    critic: &BoundCritic,
    real: &Tensor,
    fake: &Tensor,
    eps: &[f64],
) -> Result<Var> {
    if real.shape() != fake.shape() {
        return Err(TrainError::Tensor(TensorError::ShapeMismatch {
            op: "gradient_penalty",
            lhs: real.shape().to_vec(),
            rhs: fake.shape().to_vec(),
        }));
    }
    let n = real.shape()[0];
    assert_eq!(eps.len(), n);
    // x_eps = eps*real + (1-eps)*fake, built detached: the interpolate is
    // the leaf the inner gradient is taken against.
    let per = real.len() / n;
    let mixed: Vec<f64> = real
        .data()
        .iter()
        .zip(fake.data())
        .enumerate()
        .map(|(i, (&r, &f))| {
            let e = eps[i / per];
            e * r + (1.0 - e) * f
        })
        .collect();
    let xt = tape.leaf(Tensor::from_parts(real.shape().to_vec(), mixed), true);
    let scores = critic.forward(tape, xt)?;
    let total = tape.sum_all(scores)?;
    let grads = tape.backward(total)?;
    let g = grads
        .get(xt)
        .ok_or_else(|| TrainError::Config("critic ignores its input".into()))?;
    let gsq = tape.mul(g, g)?;
    let per_ex = tape.sum_to(gsq, &[n, 1, 1, 1])?;
    let per_ex = tape.reshape(per_ex, &[n])?;
    let norm = tape.sqrt(per_ex);
    let dev = tape.add_scalar(norm, -1.0);
    let dev2 = tape.mul(dev, dev)?;
    Ok(tape.mean_all(dev2)?)
}

/// Outcome of a whole training run.
pub struct TrainOutcome {
    pub reports: Vec<StepReport>,
    pub vnet: VelocityNet,
    pub critic: Option<Critic>,
    pub stopped_early: bool,
}

/// Drive the configured number of steps over the dataset, writing a JSONL
/// report and checkpoints under `out_dir` when given.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mode_ok = matches!(
        (cfg.mode, dataset.mode()),
        (TrainMode::PairedL2, DatasetMode::Paired)
            | (TrainMode::UnpairedGan, DatasetMode::Unpaired)
    );
    if !mode_ok {
        return Err(TrainError::ModeMismatch {
            dataset: dataset.mode(),
            config: cfg.mode,
        });
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|source| {
            TrainError::Data(DataError::Io {
                path: dir.display().to_string(),
                source,
            })
        })?;
    }
    let mut trainer = Trainer::new(cfg.clone(), dataset.dims())?;
    let mut reports: Vec<StepReport> = Vec::with_capacity(cfg.max_steps);
    let mut report_file = match out_dir {
        Some(dir) => Some(std::io::BufWriter::new(
            std::fs::File::create(dir.join("report.jsonl")).map_err(|source| {
                TrainError::Data(DataError::Io {
                    path: dir.join("report.jsonl").display().to_string(),
                    source,
                })
            })?,
        )),
        None => None,
    };

    let mut stopped_early = false;
    let mut primary: Vec<f64> = Vec::new();

    let mut batch_stream = BatchStream::new(dataset, cfg.batch_size, cfg.seed);
    let mut step = 0usize;
    while step < cfg.max_steps {
        let report = match cfg.mode {
            TrainMode::PairedL2 => {
                let batch = batch_stream.next_paired()?;
                trainer.l2_step(&batch)?
            }
            TrainMode::UnpairedGan => {
                let mut critic_batches = Vec::with_capacity(cfg.n_critic);
                for _ in 0..cfg.n_critic {
                    critic_batches.push(batch_stream.next_unpaired()?);
                }
                let (gen_x0, _) = batch_stream.next_unpaired()?;
                trainer.gan_step(&critic_batches, &gen_x0)?
            }
        };
        step = report.step;
        let key = match cfg.mode {
            TrainMode::PairedL2 => "l2",
            TrainMode::UnpairedGan => "wdist",
        };
        if let Some(v) = report.loss(key) {
            primary.push(v);
        }
        if let Some(f) = report_file.as_mut() {
            use std::io::Write;
            serde_json::to_writer(&mut *f, &report)
                .map_err(|e| TrainError::Config(format!("report serialization: {e}")))?;
            writeln!(f).map_err(|source| {
                TrainError::Data(DataError::Io {
                    path: "report.jsonl".into(),
                    source,
                })
            })?;
        }
        reports.push(report);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            if let Some(dir) = out_dir {
                save_velocity_net(dir.join(format!("ckpt_{step:06}.wnode")), &trainer.vnet)?;
            }
        }
        if cfg.early_stop && primary.len() >= 400 {
            let recent: f64 =
                primary[primary.len() - 200..].iter().sum::<f64>() / 200.0;
            let older: f64 = primary[primary.len() - 400..primary.len() - 200]
                .iter()
                .sum::<f64>()
                / 200.0;
            if older - recent < 1e-5 {
                stopped_early = true;
                break;
            }
        }
    }
    if let Some(f) = report_file.as_mut() {
        use std::io::Write;
        f.flush().ok();
    }
    if let Some(dir) = out_dir {
        save_velocity_net(dir.join("ckpt_final.wnode"), &trainer.vnet)?;
    }
    Ok(TrainOutcome {
        reports,
        vnet: trainer.vnet,
        critic: trainer.critic,
        stopped_early,
    })
}

/// Endless deterministic batch supply: reshuffles per epoch, drops
/// remainders, keeps paired/unpaired access uniform.
struct BatchStream<'d> {
    dataset: &'d Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    n_batches: usize,
}

impl<'d> BatchStream<'d> {
    fn new(dataset: &'d Dataset, batch_size: usize, seed: u64) -> Self {
        BatchStream {
            dataset,
            batch_size,
            seed,
            epoch: 0,
            cursor: 0,
            n_batches: dataset.len() / batch_size,
        }
    }

    fn next_index(&mut self) -> (u64, usize) {
        if self.cursor >= self.n_batches {
            self.cursor = 0;
            self.epoch += 1;
        }
        let out = (self.epoch, self.cursor);
        self.cursor += 1;
        out
    }

    fn next_paired(&mut self) -> Result<Vec<(&'d ImageFrame, &'d ImageFrame)>> {
        let (epoch, idx) = self.next_index();
        let all = batches(self.dataset, self.batch_size, self.seed, epoch)?;
        match all.into_iter().nth(idx).unwrap() {
            Batch::Paired(items) => Ok(items),
            _ => unreachable!(),
        }
    }

    fn next_unpaired(&mut self) -> Result<(Vec<&'d ImageFrame>, Vec<&'d ImageFrame>)> {
        let (epoch, idx) = self.next_index();
        let all = batches(self.dataset, self.batch_size, self.seed, epoch)?;
        match all.into_iter().nth(idx).unwrap() {
            Batch::Unpaired { x0, x1 } => Ok((x0, x1)),
            _ => unreachable!(),
        }
    }
}
