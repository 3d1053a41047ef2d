//! The distillation loop, learning-rate schedule, metrics and checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{differing_fields, DistillConfig, TeacherKind};
use crate::data::{augment, Dataset};
use crate::error::{io_err, Error, Result};
use crate::losses::LossBreakdown;
use crate::manifest::Manifest;
use crate::masking::{expand_hierarchy, generate_mask_with, MaskHierarchy};
use crate::ntnsr::{self, Precision};
use crate::optim::OptimizerState;
use crate::queue::{DistillQueue, MemoryQueue};
use crate::student::{Mode, StudentModel};
use crate::tape::Tape;
use crate::teacher::{FileTeacher, TeacherProvider, ToyTeacher};
use crate::tensor::Tensor;

/// Linear warm-up from 0 to `base` over `warmup` steps, then cosine decay
/// reaching 0 at `total`.
pub fn lr_at(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub const METRICS_HEADER: &str = "step,lr,l_sim,l_feat,total,queue_fill,ms";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub l_sim: f64,
    pub l_feat: f64,
    pub total: f64,
    pub queue_fill: f64,
    pub ms: f64,
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.step, self.lr, self.l_sim, self.l_feat, self.total, self.queue_fill, self.ms
        )
    }

    /// Equality of every field except wall time, compared bitwise.
    pub fn same_values(&self, other: &StepRecord) -> bool {
        self.step == other.step
            && [self.lr, self.l_sim, self.l_feat, self.total, self.queue_fill]
                .iter()
                .zip([other.lr, other.l_sim, other.l_feat, other.total, other.queue_fill])
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub fn write_metrics(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in records {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn append_metrics(path: &Path, r: &StepRecord) -> Result<()> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| io_err(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(METRICS_HEADER);
        text.push('\n');
    }
    text.push_str(&r.csv_line());
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| io_err(path, e))
}

pub fn build_teacher(cfg: &DistillConfig) -> Result<Box<dyn TeacherProvider>> {
    Ok(match cfg.teacher.kind {
        TeacherKind::Toy => Box::new(ToyTeacher::new(cfg.teacher_config())?),
        TeacherKind::File => {
            let t = FileTeacher::load(&cfg.teacher.path, Some(cfg.student.embed_dim))?;
            if t.renormalized_rows > 0 {
                eprintln!("warning: re-normalized {} teacher token rows on load", t.renormalized_rows);
            }
            Box::new(t)
        }
    })
}

pub struct Trainer {
    pub cfg: DistillConfig,
    pub student: StudentModel,
    pub opt: OptimizerState,
    pub queue: DistillQueue,
    teacher: Box<dyn TeacherProvider>,
    rng: ChaCha8Rng,
    pub step: usize,
    pub metrics: Vec<StepRecord>,
    train_count: usize,
}

impl Trainer {
    /// Fresh run over the first `train_count` training items.
    pub fn new(cfg: DistillConfig, teacher: Box<dyn TeacherProvider>, ds: &Dataset) -> Result<Self> {
        cfg.validate()?;
        if teacher.embed_dim() != cfg.student.embed_dim || teacher.num_tokens() != cfg.student.num_tokens() {
            return Err(Error::Config(format!(
                "teacher emits {} tokens of dim {}, student emits {} tokens of dim {}",
                teacher.num_tokens(),
                teacher.embed_dim(),
                cfg.student.num_tokens(),
                cfg.student.embed_dim
            )));
        }
        if ds.image_size() != cfg.student.image_size {
            return Err(Error::Data(format!(
                "dataset images are {}px, student.image_size is {}",
                ds.image_size(),
                cfg.student.image_size
            )));
        }
        let train_count = match cfg.data.train_limit {
            0 => ds.train_count,
            n => n.min(ds.train_count),
        };
        if train_count < cfg.run.batch_size {
            return Err(Error::Data(format!(
                "{} training images is fewer than one batch of {}",
                train_count, cfg.run.batch_size
            )));
        }
        let student = StudentModel::new(cfg.student.clone())?;
        let opt = OptimizerState::new(cfg.optim.optimizer());
        let queue = DistillQueue::new(MemoryQueue::new(cfg.distill.queue_capacity, cfg.student.embed_dim)?);
        let rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
        Ok(Self { cfg, student, opt, queue, teacher, rng, step: 0, metrics: Vec::new(), train_count })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_count / self.cfg.run.batch_size
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.run.epochs * self.steps_per_epoch()
    }

    pub fn warmup_steps(&self) -> usize {
        self.cfg.optim.warmup_epochs * self.steps_per_epoch()
    }

    pub fn lr(&self, step: usize) -> f64 {
        lr_at(step, self.total_steps(), self.warmup_steps(), self.cfg.optim.lr)
    }

    /// Dataset indices of the batch at `step`; each epoch's order is a
    /// function of the run seed and the epoch alone.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, b) = (step / spe, step % spe);
        let mut order: Vec<usize> = (0..self.train_count).collect();
        let seed = self.cfg.run.seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let bs = self.cfg.run.batch_size;
        order[b * bs..(b + 1) * bs].to_vec()
    }

    fn masks(&mut self, n: usize) -> Result<Vec<MaskHierarchy>> {
        let g = self.cfg.student.grid_size();
        let sizes = self.cfg.student.mask_sizes();
        (0..n)
            .map(|_| expand_hierarchy(&generate_mask_with(g, g, self.cfg.distill.mask_ratio, &mut self.rng)?, &sizes))
            .collect()
    }

    /// One optimizer step: augment, teacher forward, student forward,
    /// feature loss, enqueue and teacher similarity, student similarity,
    /// similarity loss, backward and update.
    pub fn distill_step(&mut self, ds: &Dataset) -> Result<LossBreakdown> {
        let started = Instant::now();
        let step = self.step;
        let at_step = |e: Error| match e {
            Error::NonFinite(op) => Error::NonFinite(format!("{} at step {}", op, step)),
            e => e,
        };
        let idx = self.batch_indices(step);
        let images = augment(&ds.gather(&idx)?, &self.cfg.augment, &mut self.rng)?;
        let hier = self.masks(idx.len())?;

        let mut t_tokens = Vec::with_capacity(idx.len());
        let mut t_emb = Vec::with_capacity(idx.len());
        for (b, &i) in idx.iter().enumerate() {
            let out = self.teacher.encode(i, &images.index0(b)?, &hier[b].grid).map_err(at_step)?;
            t_tokens.push(out.tokens);
            t_emb.push(out.embedding);
        }
        let t_tokens = Tensor::stack(&t_tokens)?;

        let mut tape = Tape::new();
        let out = self.student.forward_default(&mut tape, &images, &hier, Mode::Train).map_err(at_step)?;
        let feat = tape.feature_mse(&t_tokens, out.tokens).map_err(at_step)?;

        let d = &self.cfg.distill;
        self.queue.begin_step();
        self.queue.enqueue_teacher(&t_emb)?;
        let sim = self.queue.teacher_distributions(&t_emb, d.tau)?;
        let weights = d.weights();
        let mut total = tape.scale(feat, weights.feat).map_err(at_step)?;
        let mut l_sim = None;
        if let Some((snapshot, p_t)) = sim {
            let pooled = tape.mean_axis1(out.tokens)?;
            let s_emb = tape.l2_normalize_rows(pooled).map_err(at_step)?;
            let t_mat = Tensor::new(&[t_emb.len(), t_emb[0].len()], t_emb.concat())?;
            let p_s =
                self.queue.student_distributions(&mut tape, s_emb, &t_mat, &snapshot, d.tau, d.similarity_mode).map_err(at_step)?;
            let ls = tape.pearson_loss(&p_t, p_s).map_err(at_step)?;
            l_sim = Some(tape.value(ls).item());
            let weighted = tape.scale(ls, weights.sim)?;
            total = tape.add(total, weighted).map_err(at_step)?;
        }
        let breakdown = LossBreakdown::combine(l_sim, tape.value(feat).item(), weights);
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!("total loss at step {}", step)));
        }

        let grads = tape.backward(total).map_err(at_step)?.param_grads(&tape);
        let lr = self.lr(step);
        self.opt.step(&mut self.student.params, &grads, lr).map_err(at_step)?;
        self.student.apply_norm_updates(&out.norm_updates);
        self.metrics.push(StepRecord {
            step,
            lr,
            l_sim: breakdown.l_sim,
            l_feat: breakdown.l_feat,
            total: breakdown.total,
            queue_fill: self.queue.queue.fill_fraction(),
            ms: started.elapsed().as_secs_f64() * 1e3,
        });
        self.step += 1;
        Ok(breakdown)
    }

    /// Step until `until` (capped at the schedule length), appending each
    /// record to `metrics_path` when given and checkpointing into
    /// `<out_dir>/ckpt-<step>` every `run.checkpoint_every` steps.
    pub fn run(&mut self, ds: &Dataset, until: usize, metrics_path: Option<&Path>) -> Result<()> {
        let until = until.min(self.total_steps());
        while self.step < until {
            self.distill_step(ds)?;
            if let Some(p) = metrics_path {
                append_metrics(p, self.metrics.last().expect("record"))?;
            }
            let every = self.cfg.run.checkpoint_every;
            if every > 0 && self.step % every == 0 {
                self.save_checkpoint(&self.cfg.run.out_dir.join(format!("ckpt-{:06}", self.step)))?;
            }
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("params")).map_err(|e| io_err(dir, e))?;
        fs::create_dir_all(dir.join("momentum")).map_err(|e| io_err(dir, e))?;
        fs::write(dir.join(CONFIG_FILE), self.cfg.to_toml()).map_err(|e| io_err(dir, e))?;
        let mut m = Manifest::new();
        m.set("kind", "checkpoint")
            .set("step", self.step)
            .set("config_hash", format!("{:016x}", self.cfg.hash()))
            .set("optimizer_step", self.opt.step)
            .set("rng_seed", self.rng.get_seed().iter().map(|b| format!("{:02x}", b)).collect::<String>())
            .set("rng_word_pos", self.rng.get_word_pos())
            .set("rng_stream", self.rng.get_stream());
        let params = &self.student.params;
        for id in params.ids() {
            let name = params.name(id);
            let t = params.get(id);
            m.set(&format!("param.{}", name), shape_string(t.shape()));
            ntnsr::write(&dir.join("params").join(format!("{}.ntsd", name)), t, Precision::F64)?;
        }
        for (id, buf) in &self.opt.buffers {
            ntnsr::write(&dir.join("momentum").join(format!("{}.ntsd", params.name(*id))), buf, Precision::F64)?;
            m.set(&format!("momentum.{}", params.name(*id)), shape_string(buf.shape()));
        }
        let (slots, cursor, count) = self.queue.queue.state();
        ntnsr::write(&dir.join("queue.ntsd"), &slots, Precision::F64)?;
        m.set("queue_cursor", cursor).set("queue_count", count);
        m.write(&dir.join(CHECKPOINT_MANIFEST))
    }

    /// Resume a run saved by [`Trainer::save_checkpoint`]. `cfg` must match
    /// the configuration stored in the checkpoint.
    pub fn resume(cfg: DistillConfig, teacher: Box<dyn TeacherProvider>, ds: &Dataset, dir: &Path) -> Result<Self> {
        let (saved, m) = read_checkpoint_header(dir)?;
        let diff = differing_fields(&saved, &cfg);
        if !diff.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint {} was written with a different config (fields: {})",
                dir.display(),
                diff.join(", ")
            )));
        }
        let mut t = Self::new(cfg, teacher, ds)?;
        let origin = dir.join(CHECKPOINT_MANIFEST).display().to_string();
        load_params_into(&mut t.student, dir, &m)?;
        for id in t.student.params.trainable_ids() {
            let name = t.student.params.name(id).to_string();
            if m.get(&format!("momentum.{}", name)).is_some() {
                let buf = ntnsr::read(&dir.join("momentum").join(format!("{}.ntsd", name)))?;
                if buf.shape() != t.student.params.get(id).shape() {
                    return Err(Error::Format { path: origin.clone(), detail: format!("momentum {} has wrong shape", name) });
                }
                t.opt.buffers.insert(id, buf);
            }
        }
        t.opt.step = m.parse("optimizer_step", &origin)?;
        t.step = m.parse("step", &origin)?;
        let slots = ntnsr::read(&dir.join("queue.ntsd"))?;
        t.queue = DistillQueue::new(MemoryQueue::from_state(slots, m.parse("queue_cursor", &origin)?, m.parse("queue_count", &origin)?)?);
        if t.queue.queue.dim() != t.cfg.student.embed_dim || t.queue.queue.capacity() != t.cfg.distill.queue_capacity {
            return Err(Error::Format { path: origin, detail: "queue state does not match the config".into() });
        }
        let seed_hex: String = m.parse("rng_seed", &origin)?;
        let mut seed = [0u8; 32];
        if seed_hex.len() != 64 {
            return Err(Error::Format { path: origin, detail: "rng_seed must be 64 hex digits".into() });
        }
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::Format { path: origin.clone(), detail: "rng_seed is not hex".into() })?;
        }
        t.rng = ChaCha8Rng::from_seed(seed);
        t.rng.set_stream(m.parse("rng_stream", &origin)?);
        t.rng.set_word_pos(m.parse("rng_word_pos", &origin)?);
        Ok(t)
    }
}

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_MANIFEST: &str = "checkpoint.manifest";

fn shape_string(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn read_checkpoint_header(dir: &Path) -> Result<(DistillConfig, Manifest)> {
    let cpath = dir.join(CONFIG_FILE);
    if !cpath.exists() {
        return Err(Error::Data(format!("checkpoint {} not found", dir.display())));
    }
    let text = fs::read_to_string(&cpath).map_err(|e| io_err(&cpath, e))?;
    let saved = DistillConfig::from_toml(&text, &cpath.display().to_string())?;
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    let m = Manifest::read(&mpath)?;
    let origin = mpath.display().to_string();
    let hash: String = m.parse("config_hash", &origin)?;
    if hash != format!("{:016x}", saved.hash()) {
        return Err(Error::Format { path: origin, detail: format!("config hash {} does not match {}", hash, CONFIG_FILE) });
    }
    Ok((saved, m))
}

fn load_params_into(student: &mut StudentModel, dir: &Path, m: &Manifest) -> Result<()> {
    let origin = dir.join(CHECKPOINT_MANIFEST).display().to_string();
    let ids: Vec<_> = student.params.ids().collect();
    for id in ids {
        let name = student.params.name(id).to_string();
        if m.get(&format!("param.{}", name)).is_none() {
            return Err(Error::Format { path: origin, detail: format!("missing parameter {}", name) });
        }
        let t = ntnsr::read(&dir.join("params").join(format!("{}.ntsd", name)))?;
        student.params.set(id, t)?;
    }
    Ok(())
}

/// The student stored in a checkpoint, with the config it was trained
/// under.
pub fn load_student(dir: &Path) -> Result<(DistillConfig, StudentModel)> {
    let (cfg, m) = read_checkpoint_header(dir)?;
    let mut student = StudentModel::new(cfg.student.clone())?;
    load_params_into(&mut student, dir, &m)?;
    Ok((cfg, student))
}
